//! Softmax and the two normalisation layers.

use super::{dim_err, GradSink, Op, Tape, Values, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const NORM_EPS: f64 = 1e-5;

impl Tape {
    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| {
            Error::Dimension("softmax needs at least one axis".into())
        })?;
        let mut out = x.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Normalise over the last axis, then scale by `gamma` and shift by
    /// `beta` (both of that axis' length).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension(format!("layer_norm over empty axis of {xs:?}")));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm (input, scale)", xs, self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = inv;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * gv[i % d] + bv[i % d])
            .collect();
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalisation over axis 1 of `x[N, C, ..]` using the batch's own
    /// statistics. Returns the output together with the per-channel batch
    /// mean and (biased) variance so callers can update running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x).data();
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                acc += xv[(b * c + ch) * s..][..s].iter().sum::<f64>();
            }
            mean[ch] = acc / m;
            let mut acc = 0.0;
            for b in 0..n {
                acc += xv[(b * c + ch) * s..][..s]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = acc / m;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, true, (n, c, s))?;
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(Error::Dimension(format!(
                "running statistics of length {} for {} channels",
                mean.len(),
                dims.1
            )));
        }
        self.bn_apply(x, gamma, beta, mean, var, false, dims)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 || xs[1] == 0 {
            return Err(Error::Dimension(format!("batch_norm expects [N, C, ..], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err("batch_norm (input, scale)", xs, self.shape(gamma)));
        }
        Ok((xs[0], c, numel(&xs[2..])))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
        (n, c, s): (usize, usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gv[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(super) fn backward(op: &Op, val: &Values, out: &Tensor, g: Vec<f64>, sink: &mut GradSink) {
    match *op {
        Op::Softmax(a) => {
            let d = *out.shape().last().unwrap();
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            sink.add(a, ga);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
        } => {
            let gv = val.get(gamma).data();
            let d = gv.len();
            if sink.wants(gamma) || sink.wants(beta) {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        gg[i] += gr[i] * hr[i];
                        gb[i] += gr[i];
                    }
                }
                sink.add(gamma, gg);
                sink.add(beta, gb);
            }
            if sink.wants(x) {
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, hr), dr)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_gh: f64 = gh.iter().sum();
                    let sum_ghh: f64 = gh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let k = inv_std[r] / d as f64;
                    for i in 0..d {
                        dr[i] = k * (d as f64 * gh[i] - sum_gh - hr[i] * sum_ghh);
                    }
                }
                sink.add(x, gx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
            batch_stats,
        } => {
            let xs = val.get(x).shape();
            let (n, c, s) = (xs[0], xs[1], numel(&xs[2..]));
            let gv = val.get(gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gh = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for i in base..base + s {
                        sum_g[ch] += g[i];
                        sum_gh[ch] += g[i] * xhat[i];
                    }
                }
            }
            if sink.wants(x) {
                let m = (n * s) as f64;
                let mut gx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        let scale = gv[ch] * inv_std[ch];
                        for i in base..base + s {
                            gx[i] = if batch_stats {
                                scale / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gh[ch])
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                sink.add(x, gx);
            }
            sink.add(gamma, sum_gh);
            sink.add(beta, sum_g);
        }
        _ => unreachable!("not a normalisation op"),
    }
}
