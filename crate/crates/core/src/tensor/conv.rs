//! Spatial operations on `[N × C × H × W]` tensors.

use super::{Scalar, Tensor, Var};
use crate::error::{dim_err, Result};

fn dims4<T: Scalar>(x: &Tensor<T>, op: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(dim_err!("{op} needs an [N, C, H, W] tensor, got {s:?}")),
    }
}

/// Output extent of a sliding window, or `None` when it would be empty.
pub(crate) fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad` is inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(s) };
        let hi = if self.w + self.pad > kj { ((self.w + self.pad - kj - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.cols();
        let s = self.stride;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = oy * s + ki;
                        if iy < self.pad || iy - self.pad >= self.h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy - self.pad) * self.w..][..self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let first = lo * s + kj - self.pad;
                            if s == 1 {
                                line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (d, v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                    *d = *v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let p = self.cols();
        let s = self.stride;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_ox(kj);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * s + kj - self.pad;
                    for oy in 0..self.ho {
                        let iy = oy * s + ki;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy - self.pad) * self.w..][..self.w];
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if s == 1 {
                            for (d, v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in dst[first..].iter_mut().step_by(s).zip(line) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D cross-correlation with zero padding and no bias.
    /// `self: [N × C × H × W]`, `weight: [F × C × kh × kw]`.
    pub fn conv2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let [n, c, h, wd] = dims4(&x, "conv2d")?;
        let [f, wc, kh, kw] = dims4(&w, "conv2d weight")?;
        if wc != c {
            return Err(dim_err!(
                "conv2d: input {:?} has {c} channels, weight {:?} expects {wc}",
                x.shape(),
                w.shape()
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be at least 1"));
        }
        let (Some(ho), Some(wo)) = (out_extent(h, kh, stride, pad), out_extent(wd, kw, stride, pad))
        else {
            return Err(dim_err!(
                "conv2d: kernel {kh}x{kw} with pad {pad} does not fit input {h}x{wd}"
            ));
        };
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, ho, wo };
        let (rows, p) = (geom.rows(), geom.cols());
        let in_size = c * h * wd;
        let mut out = vec![T::zero(); n * f * p];
        let mut cols = vec![T::zero(); n * rows * p];
        for s in 0..n {
            let col = &mut cols[s * rows * p..(s + 1) * rows * p];
            geom.im2col(&x.data()[s * in_size..(s + 1) * in_size], col);
            T::gemm(
                f,
                rows,
                p,
                w.data(),
                (rows as isize, 1),
                col,
                (p as isize, 1),
                T::zero(),
                &mut out[s * f * p..(s + 1) * f * p],
            );
        }
        let value = Tensor::new([n, f, ho, wo], out)?;
        Ok(self.graph().apply("conv2d", &[self, weight], value, move |g, need| {
            let gd = g.data();
            let mut col = vec![T::zero(); rows * p];
            let mut dw = need[1].then(|| vec![T::zero(); f * rows]);
            let mut dx = need[0].then(|| vec![T::zero(); n * in_size]);
            for s in 0..n {
                let gs = &gd[s * f * p..(s + 1) * f * p];
                if let Some(dw) = dw.as_mut() {
                    let cs = &cols[s * rows * p..(s + 1) * rows * p];
                    // dw += g_s · colᵀ
                    T::gemm(f, p, rows, gs, (p as isize, 1), cs, (1, p as isize), T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol = wᵀ · g_s
                    T::gemm(rows, f, p, w.data(), (1, rows as isize), gs, (p as isize, 1), T::zero(), &mut col);
                    geom.col2im(&col, &mut dx[s * in_size..(s + 1) * in_size]);
                }
            }
            vec![
                dx.map(|d| Tensor::new([n, c, h, geom.w], d).expect("shape")),
                dw.map(|d| Tensor::new([f, c, kh, kw], d).expect("shape")),
            ]
        }))
    }

    /// Mean over spatial positions: `[N × C × H × W] → [N × C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "global_avg_pool")?;
        self.reshape([n, c, h * w])?.mean_axis(2)
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "avg_pool2d")?;
        let (Some(ho), Some(wo)) = (out_extent(h, kernel, stride, 0), out_extent(w, kernel, stride, 0))
        else {
            return Err(dim_err!("avg_pool2d: window {kernel} stride {stride} does not fit {h}x{w}"));
        };
        let inv = T::one() / T::from_f64((kernel * kernel) as f64);
        let xd = x.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for i in 0..kernel {
                        for j in 0..kernel {
                            acc += src[(oy * stride + i) * w + ox * stride + j];
                        }
                    }
                    out[(plane * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.graph().apply("avg_pool2d", &[self], value, move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gd[(plane * ho + oy) * wo + ox] * inv;
                        for i in 0..kernel {
                            for j in 0..kernel {
                                dx[plane * h * w + (oy * stride + i) * w + ox * stride + j] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], dx).expect("shape"))]
        }))
    }

    /// Max pooling without padding; a tie routes the gradient to the first
    /// maximal element in row-major window order.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "max_pool2d")?;
        let (Some(ho), Some(wo)) = (out_extent(h, kernel, stride, 0), out_extent(w, kernel, stride, 0))
        else {
            return Err(dim_err!("max_pool2d: window {kernel} stride {stride} does not fit {h}x{w}"));
        };
        let xd = x.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let at = plane * h * w + (oy * stride + i) * w + ox * stride + j;
                            if xd[at] > best {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.graph().apply("max_pool2d", &[self], value, move |g, _| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for (o, &at) in argmax.iter().enumerate() {
                dx[at] += g.data()[o];
            }
            vec![Some(Tensor::new([n, c, h, w], dx).expect("shape"))]
        }))
    }
}
