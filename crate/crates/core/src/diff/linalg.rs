//! Matrix products: fully connected layers, batched matmul, and fixed
//! matrices applied along one axis.

use super::{dim_err, GradSink, Op, Tape, Values, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{numel, Tensor};

impl Tape {
    /// `y[.., j] = Σ_k w[j, k] x[.., k] + b[j]` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(dim_err("linear (input, weight)", xs, ws));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err("linear (weight, bias)", ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * dout];
        par::chunks_mut(&mut out, dout, rows * dout * din, |r, yr| {
            let xr = &xv[r * din..(r + 1) * din];
            for (j, y) in yr.iter_mut().enumerate() {
                let wr = &wv[j * din..(j + 1) * din];
                let mut s = bv.map_or(0.0, |b| b[j]);
                for k in 0..din {
                    s += wr[k] * xr[k];
                }
                *y = s;
            }
        });
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched matrix product `a[.., m, k] · b[.., k, n]` with identical
    /// leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] || sa[nd - 1] != sb[nd - 2] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        let batch = numel(&sa[..nd - 2]);
        let mut shape = sa.to_vec();
        shape[nd - 1] = n;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        par::chunks_mut(&mut out, n, batch * m * n * k, |row, yr| {
            let t = row / m.max(1);
            let ar = &av[row * k..(row + 1) * k];
            let bm = &bv[t * k * n..(t + 1) * k * n];
            for (p, &ap) in ar.iter().enumerate() {
                let br = &bm[p * n..(p + 1) * n];
                for (y, &q) in yr.iter_mut().zip(br) {
                    *y += ap * q;
                }
            }
        });
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Apply the fixed square `matrix` along `axis`:
    /// `y[.., i, ..] = Σ_j matrix[i, j] x[.., j, ..]`.
    pub fn mix_axis(&mut self, x: Var, matrix: &Tensor, axis: usize) -> Result<Var> {
        let xs = self.shape(x);
        if axis >= xs.len() || matrix.shape() != [xs[axis], xs[axis]] {
            return Err(Error::Dimension(format!(
                "mixing matrix {:?} does not fit axis {axis} of {xs:?}",
                matrix.shape()
            )));
        }
        let out = mix(self.value(x), matrix.data(), axis, false);
        Ok(self.push(
            out,
            Op::MixAxis {
                x,
                matrix: matrix.clone(),
                axis,
            },
            &[x],
        ))
    }
}

fn mix(x: &Tensor, m: &[f64], axis: usize, transpose: bool) -> Tensor {
    let shape = x.shape();
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let n = shape[axis];
    let xv = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..n {
            let dst = (o * n + i) * inner;
            for j in 0..n {
                let c = if transpose { m[j * n + i] } else { m[i * n + j] };
                if c == 0.0 {
                    continue;
                }
                let src = (o * n + j) * inner;
                for t in 0..inner {
                    out[dst + t] += c * xv[src + t];
                }
            }
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

pub(super) fn backward(op: &Op, val: &Values, g: Vec<f64>, sink: &mut GradSink) {
    match *op {
        Op::Linear { x, w, b } => {
            let ws = val.get(w).shape();
            let (dout, din) = (ws[0], ws[1]);
            let xv = val.get(x).data();
            let wv = val.get(w).data();
            let rows = xv.len() / din.max(1);
            if sink.wants(x) {
                let mut gx = vec![0.0; rows * din];
                par::chunks_mut(&mut gx, din, rows * dout * din, |r, gr| {
                    for j in 0..dout {
                        let d = g[r * dout + j];
                        let wr = &wv[j * din..(j + 1) * din];
                        for (o, &q) in gr.iter_mut().zip(wr) {
                            *o += d * q;
                        }
                    }
                });
                sink.add(x, gx);
            }
            if sink.wants(w) {
                let mut gw = vec![0.0; dout * din];
                par::chunks_mut(&mut gw, din, rows * dout * din, |j, gr| {
                    for r in 0..rows {
                        let d = g[r * dout + j];
                        if d == 0.0 {
                            continue;
                        }
                        for (o, &p) in gr.iter_mut().zip(&xv[r * din..(r + 1) * din]) {
                            *o += d * p;
                        }
                    }
                });
                sink.add(w, gw);
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    let mut gb = vec![0.0; dout];
                    for r in 0..rows {
                        for (o, d) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += d;
                        }
                    }
                    sink.add(b, gb);
                }
            }
        }
        Op::MatMul(a, b) => {
            let sa = val.get(a).shape();
            let sb = val.get(b).shape();
            let nd = sa.len();
            let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
            let batch = numel(&sa[..nd - 2]);
            let av = val.get(a).data();
            let bv = val.get(b).data();
            if sink.wants(a) {
                // ga[i, p] = Σ_j g[i, j] b[p, j]
                let mut ga = vec![0.0; batch * m * k];
                par::chunks_mut(&mut ga, k, batch * m * n * k, |row, gr| {
                    let t = row / m.max(1);
                    let gi = &g[row * n..(row + 1) * n];
                    for (p, o) in gr.iter_mut().enumerate() {
                        let br = &bv[(t * k + p) * n..(t * k + p + 1) * n];
                        *o = gi.iter().zip(br).map(|(x, y)| x * y).sum();
                    }
                });
                sink.add(a, ga);
            }
            if sink.wants(b) {
                // gb[p, j] = Σ_i a[i, p] g[i, j]
                let mut gb = vec![0.0; batch * k * n];
                par::chunks_mut(&mut gb, n, batch * m * n * k, |row, gr| {
                    let t = row / k.max(1);
                    let p = row % k.max(1);
                    for i in 0..m {
                        let aip = av[(t * m + i) * k + p];
                        let gi = &g[(t * m + i) * n..(t * m + i + 1) * n];
                        for (o, &d) in gr.iter_mut().zip(gi) {
                            *o += aip * d;
                        }
                    }
                });
                sink.add(b, gb);
            }
        }
        Op::MixAxis {
            x,
            ref matrix,
            axis,
        } => {
            let gt = Tensor::new(val.get(x).shape(), g).expect("grad matches input");
            sink.add(x, mix(&gt, matrix.data(), axis, true).into_data());
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Mode;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_weights() {
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape.constant(t(&[1, 2], &[1., 2.]));
        let w = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2.]);
    }

    #[test]
    fn linear_hand_arithmetic() {
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape.constant(t(&[1, 2], &[1., 1.]));
        let w = tape.constant(t(&[1, 2], &[2., 3.]));
        let b = tape.constant(t(&[1], &[1.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new(Mode::Eval, 0);
        let a = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[1, 2, 1], &[1., 1.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 7.]);
        assert!(tape.matmul(a, a).is_ok());
        let c = tape.constant(Tensor::zeros(&[1, 3, 1]));
        assert!(tape.matmul(a, c).is_err());
    }

    #[test]
    fn mix_axis_applies_matrix() {
        let mut tape = Tape::new(Mode::Eval, 0);
        // shape [node=2, time=2]
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let m = t(&[2, 2], &[0., 1., 1., 0.]);
        let y = tape.mix_axis(x, &m, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 4., 1., 2.]);
    }
}
