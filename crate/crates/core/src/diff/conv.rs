//! Stride-1 zero-padded cross-correlation and max pooling.

use super::{GradSink, Op, Tape, Values, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    /// Output columns `j` for which input column `j + b - pw` is in range.
    #[inline]
    fn cols(&self, b: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(b);
        let hi = (self.w + self.pw).saturating_sub(b).min(self.wo);
        (lo, hi.max(lo))
    }

    #[inline]
    fn rows(&self, a: usize) -> (usize, usize) {
        let lo = self.ph.saturating_sub(a);
        let hi = (self.h + self.ph).saturating_sub(a).min(self.ho);
        (lo, hi.max(lo))
    }

    fn macs(&self) -> usize {
        self.n * self.co * self.ci * self.kh * self.kw * self.ho * self.wo
    }
}

impl Tape {
    /// `x[N, Cin, H, W]` ⋆ `k[Cout, Cin, kh, kw]` with zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: (usize, usize)) -> Result<Var> {
        let d = conv_dims(self.shape(x), self.shape(k), pad)?;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let plane = d.ho * d.wo;
        let mut out = vec![0.0; d.n * d.co * plane];
        par::chunks_mut(&mut out, plane, d.macs(), |idx, y| {
            let (n, co) = (idx / d.co, idx % d.co);
            for ci in 0..d.ci {
                let xp = &xv[(n * d.ci + ci) * d.h * d.w..][..d.h * d.w];
                let kp = &kv[(co * d.ci + ci) * d.kh * d.kw..][..d.kh * d.kw];
                for a in 0..d.kh {
                    let (ilo, ihi) = d.rows(a);
                    for b in 0..d.kw {
                        let c = kp[a * d.kw + b];
                        let (jlo, jhi) = d.cols(b);
                        for i in ilo..ihi {
                            let xr = &xp[(i + a - d.ph) * d.w..][..d.w];
                            let yr = &mut y[i * d.wo..(i + 1) * d.wo];
                            for j in jlo..jhi {
                                yr[j] += c * xr[j + b - d.pw];
                            }
                        }
                    }
                }
            }
        });
        let out = Tensor::new(&[d.n, d.co, d.ho, d.wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, k, pad }, &[x, k]))
    }

    /// `x[N, Cin, T]` ⋆ `k[Cout, Cin, kt]` with zero padding `pad`.
    pub fn conv1d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 3 {
            return Err(Error::Dimension(format!(
                "conv1d expects [N, Cin, T] and [Cout, Cin, k], got {xs:?} and {ks:?}"
            )));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let k4 = self.reshape(k, &[ks[0], ks[1], 1, ks[2]])?;
        let y = self.conv2d(x4, k4, (0, pad))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }

    /// Max pooling over the last two axes of `x[N, C, H, W]`. The gradient of
    /// each window goes to its first maximal element in row-major order.
    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Parameter(format!(
                "pool kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("maxpool2d expects 4 axes, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < kernel.0 || w < kernel.1 {
            return Err(Error::Dimension(format!(
                "pool window {kernel:?} does not fit input {xs:?}"
            )));
        }
        let ho = (h - kernel.0) / stride.0 + 1;
        let wo = (w - kernel.1) / stride.1 + 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = base + i * stride.0 * w + j * stride.1;
                    for a in 0..kernel.0 {
                        let r = base + (i * stride.0 + a) * w + j * stride.1;
                        for b in 0..kernel.1 {
                            let v = xv[r + b];
                            // a NaN wins so divergence is not hidden
                            if v > best || (v.is_nan() && !best.is_nan()) {
                                best = v;
                                at = r + b;
                            }
                        }
                    }
                    let o = (p * ho + i) * wo + j;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Max pooling over the last axis of `x[N, C, T]`.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("maxpool1d expects 3 axes, got {xs:?}")));
        }
        let x4 = self.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
        let y = self.maxpool2d(x4, (1, kernel), (1, stride))?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3]])
    }
}

fn conv_dims(xs: &[usize], ks: &[usize], pad: (usize, usize)) -> Result<ConvDims> {
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
        return Err(Error::Dimension(format!(
            "conv2d expects x [N, Cin, H, W] and k [Cout, Cin, kh, kw], got {xs:?} and {ks:?}"
        )));
    }
    let (h, w) = (xs[2], xs[3]);
    let (kh, kw) = (ks[2], ks[3]);
    if kh == 0 || kw == 0 || kh > h + 2 * pad.0 || kw > w + 2 * pad.1 {
        return Err(Error::Dimension(format!(
            "kernel {ks:?} larger than padded input {xs:?} (padding {pad:?})"
        )));
    }
    Ok(ConvDims {
        n: xs[0],
        ci: xs[1],
        h,
        w,
        co: ks[0],
        kh,
        kw,
        ph: pad.0,
        pw: pad.1,
        ho: h + 2 * pad.0 - kh + 1,
        wo: w + 2 * pad.1 - kw + 1,
    })
}

pub(super) fn backward(op: &Op, val: &Values, _out: &Tensor, g: Vec<f64>, sink: &mut GradSink) {
    match *op {
        Op::Conv2d { x, k, pad } => {
            let d = conv_dims(val.get(x).shape(), val.get(k).shape(), pad).expect("validated");
            let xv = val.get(x).data();
            let kv = val.get(k).data();
            let plane = d.ho * d.wo;
            if sink.wants(x) {
                let mut gx = vec![0.0; d.n * d.ci * d.h * d.w];
                par::chunks_mut(&mut gx, d.h * d.w, d.macs(), |idx, gp| {
                    let (n, ci) = (idx / d.ci, idx % d.ci);
                    for co in 0..d.co {
                        let gy = &g[(n * d.co + co) * plane..][..plane];
                        let kp = &kv[(co * d.ci + ci) * d.kh * d.kw..][..d.kh * d.kw];
                        for a in 0..d.kh {
                            let (ilo, ihi) = d.rows(a);
                            for b in 0..d.kw {
                                let c = kp[a * d.kw + b];
                                let (jlo, jhi) = d.cols(b);
                                for i in ilo..ihi {
                                    let gr = &gy[i * d.wo..(i + 1) * d.wo];
                                    let xr = &mut gp[(i + a - d.ph) * d.w..][..d.w];
                                    for j in jlo..jhi {
                                        xr[j + b - d.pw] += c * gr[j];
                                    }
                                }
                            }
                        }
                    }
                });
                sink.add(x, gx);
            }
            if sink.wants(k) {
                let mut gk = vec![0.0; d.co * d.ci * d.kh * d.kw];
                par::chunks_mut(&mut gk, d.kh * d.kw, d.macs(), |idx, gkp| {
                    let (co, ci) = (idx / d.ci, idx % d.ci);
                    for n in 0..d.n {
                        let gy = &g[(n * d.co + co) * plane..][..plane];
                        let xp = &xv[(n * d.ci + ci) * d.h * d.w..][..d.h * d.w];
                        for a in 0..d.kh {
                            let (ilo, ihi) = d.rows(a);
                            for b in 0..d.kw {
                                let (jlo, jhi) = d.cols(b);
                                let mut s = 0.0;
                                for i in ilo..ihi {
                                    let gr = &gy[i * d.wo..(i + 1) * d.wo];
                                    let xr = &xp[(i + a - d.ph) * d.w..][..d.w];
                                    for j in jlo..jhi {
                                        s += gr[j] * xr[j + b - d.pw];
                                    }
                                }
                                gkp[a * d.kw + b] += s;
                            }
                        }
                    }
                });
                sink.add(k, gk);
            }
        }
        Op::MaxPool2d { x, ref argmax } => {
            let mut gx = vec![0.0; val.get(x).len()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            sink.add(x, gx);
        }
        _ => unreachable!("not a convolution op"),
    }
}
