//! Shape-preserving arithmetic, views and reductions.

use rand::Rng;

use super::{dim_err, GradSink, Op, Tape, Values, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

impl Tape {
    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let n = bv.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, q) in chunk.iter_mut().zip(bv) {
                *o += q;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        let out = self.value(a).map(|x| x.powi(n));
        self.push(out, Op::Powi(a, n), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.ndim()];
        if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "permutation {perm:?} does not fit shape {:?}",
                x.shape()
            )));
        }
        let out = permute_tensor(x, perm);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Narrow { x: a, axis, start }, &[a]))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Identity in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let rng = self.rng();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x: a, mask }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension(format!(
                "mean over axis {axis} of shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let n = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= n as f64);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::MeanAxis { x: a, axis }, &[a]))
    }
}

pub(crate) fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let src = x.data();
    for _ in 0..n {
        data.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data).expect("permutation preserves size")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

pub(super) fn backward(op: &Op, val: &Values, g: Vec<f64>, sink: &mut GradSink) {
    match *op {
        Op::Add(a, b) => {
            if sink.wants(b) {
                sink.add(b, g.clone());
            }
            sink.add(a, g);
        }
        Op::Sub(a, b) => {
            if sink.wants(b) {
                sink.add(b, g.iter().map(|d| -d).collect());
            }
            sink.add(a, g);
        }
        Op::Mul(a, b) => {
            let (x, y) = (val.get(a).data(), val.get(b).data());
            if sink.wants(a) {
                sink.add(a, g.iter().zip(y).map(|(d, q)| d * q).collect());
            }
            if sink.wants(b) {
                sink.add(b, g.iter().zip(x).map(|(d, p)| d * p).collect());
            }
        }
        Op::AddBroadcast(a, b) => {
            if sink.wants(b) {
                let n = val.get(b).len();
                let mut gb = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (acc, d) in gb.iter_mut().zip(chunk) {
                        *acc += d;
                    }
                }
                sink.add(b, gb);
            }
            sink.add(a, g);
        }
        Op::Scale(a, c) => sink.add(a, g.into_iter().map(|d| c * d).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => sink.add(a, g),
        Op::Powi(a, n) => {
            let x = val.get(a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(d, &p)| d * n as f64 * p.powi(n - 1))
                .collect();
            sink.add(a, ga);
        }
        Op::Relu(a) => {
            let x = val.get(a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                .collect();
            sink.add(a, ga);
        }
        Op::Dropout { x, ref mask } => {
            sink.add(x, g.iter().zip(mask).map(|(d, m)| d * m).collect());
        }
        Op::Permute(a, ref perm) => {
            let in_shape = val.get(a).shape();
            let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            let gt = Tensor::new(&out_shape, g).expect("grad matches output");
            sink.add(a, permute_tensor(&gt, &inverse_perm(perm)).into_data());
        }
        Op::Narrow { x, axis, start } => {
            let shape = val.get(x).shape();
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let full = shape[axis];
            let len = g.len() / (outer * inner).max(1);
            let mut gx = vec![0.0; numel(shape)];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            sink.add(x, gx);
        }
        Op::Sum(a) => sink.add(a, vec![g[0]; val.get(a).len()]),
        Op::Mean(a) => {
            let n = val.get(a).len();
            sink.add(a, vec![g[0] / n as f64; n]);
        }
        Op::MeanAxis { x, axis } => {
            let shape = val.get(x).shape();
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let n = shape[axis];
            let mut gx = vec![0.0; numel(shape)];
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = s / n as f64;
                    }
                }
            }
            sink.add(x, gx);
        }
        _ => unreachable!("not an elementwise op"),
    }
}
