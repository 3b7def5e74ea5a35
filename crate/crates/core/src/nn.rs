//! Parameterised layers built on the [`diff`](crate::diff) operators.
//!
//! Layers hold [`ParamId`]s into a shared [`ParamSet`]; the set owns the
//! values. Parameter names are dotted paths (`pinn.conv1.weight`) and double
//! as checkpoint keys.

use rand::Rng;

use crate::diff::{Mode, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            uniform_init(&[out_dim, in_dim], in_dim, rng),
            true,
        );
        let bias = params.add(
            format!("{name}.bias"),
            uniform_init(&[out_dim], in_dim, rng),
            true,
        );
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// 2-D convolution without bias (always followed by batch norm here).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub padding: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let shape = [out_ch, in_ch, kernel.0, kernel.1];
        let k = params.add(
            format!("{name}.weight"),
            uniform_init(&shape, in_ch * kernel.0 * kernel.1, rng),
            true,
        );
        Conv2d { kernel: k, padding }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let k = tape.param(params, self.kernel);
        tape.conv2d(x, k, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub padding: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let k = params.add(
            format!("{name}.weight"),
            uniform_init(&[out_ch, in_ch, kernel], in_ch * kernel, rng),
            true,
        );
        Conv1d { kernel: k, padding }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let k = tape.param(params, self.kernel);
        tape.conv1d(x, k, self.padding)
    }
}

/// Batch normalisation over axis 1 with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: params.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: params.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], 1.0),
                false,
            ),
        }
    }

    /// Train mode normalises with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward(&self, tape: &mut Tape, params: &mut ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        match tape.mode() {
            Mode::Train => {
                let m = tape.value(x).len() / tape.shape(x)[1];
                let (y, mean, var) = tape.batch_norm_train(x, g, b)?;
                let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                for (r, v) in params[self.running_mean].value.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                for (r, v) in params[self.running_var].value.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = params[self.running_mean].value.data().to_vec();
                let var = params[self.running_var].value.data().to_vec();
                tape.batch_norm_eval(x, g, b, &mean, &var)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(params, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Batch-first self-attention on `x[B, S, D]`. Returns the output
    /// `[B, S, D]` and the attention weights `[B, H, S, S]` (rows over keys).
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<(Var, Var)> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != self.dim {
            return Err(Error::Dimension(format!(
                "attention expects [B, S, {}], got {xs:?}",
                self.dim
            )));
        }
        let (b, s, d) = (xs[0], xs[1], xs[2]);
        let h = self.heads;
        let dh = d / h;
        let split = |tape: &mut Tape, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, s, h, dh])?;
            tape.permute(v, &[0, 2, 1, 3])
        };
        let q = self.query.forward(tape, params, x)?;
        let q = split(tape, q)?;
        let k = self.key.forward(tape, params, x)?;
        let k = split(tape, k)?;
        let v = self.value.forward(tape, params, x)?;
        let v = split(tape, v)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, s, d])?;
        let out = self.out.forward(tape, params, ctx)?;
        Ok((out, weights))
    }

    /// Sequence-first variant on `x[S, B, D]`.
    pub fn forward_seq_first(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<(Var, Var)> {
        let xb = tape.permute(x, &[1, 0, 2])?;
        let (y, w) = self.forward(tape, params, xb)?;
        Ok((tape.permute(y, &[1, 0, 2])?, w))
    }
}

/// Post-norm transformer encoder layer: attention and a ×4 ReLU
/// feed-forward block, each wrapped in dropout + residual + layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            ff1: Linear::new(params, &format!("{name}.ff1"), dim, 4 * dim, rng),
            ff2: Linear::new(params, &format!("{name}.ff2"), 4 * dim, dim, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            dropout,
        })
    }

    /// `x[B, S, D]` → `[B, S, D]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let (a, _) = self.attn.forward(tape, params, x)?;
        let a = tape.dropout(a, self.dropout)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, params, x)?;
        let f = self.ff1.forward(tape, params, x)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, params, f)?;
        let f = tape.dropout(f, self.dropout)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, params, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_param_count() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut params, "fc", 2, 3, &mut rng);
        assert_eq!(params.trainable_count(), 9);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut params, "a", 10, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut params, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape.constant(Tensor::randn(&[1, 3, 8], 1.0, &mut rng));
        let xs = tape.constant(tape.value(x).clone());
        let (y, w) = mha.forward_seq_first(&mut tape, &params, xs).unwrap();
        assert!(tape.value(w).data().iter().all(|&p| p == 1.0));
        // with one key the context is the value projection itself
        let v = mha.value.forward(&mut tape, &params, x).unwrap();
        let expect = mha.out.forward(&mut tape, &params, v).unwrap();
        let got = tape.permute(y, &[1, 0, 2]).unwrap();
        assert!(tape.value(got).max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut params, "a", 8, 4, &mut rng).unwrap();
        let token = Tensor::randn(&[8], 1.0, &mut rng);
        let data: Vec<f64> = (0..5).flat_map(|_| token.data().to_vec()).collect();
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape.constant(Tensor::new(&[1, 5, 8], data).unwrap());
        let (_, w) = mha.forward(&mut tape, &params, x).unwrap();
        for &p in tape.value(w).data() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut params, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new(Mode::Eval, 0);
        let x = tape.constant(Tensor::randn(&[3, 6, 8], 2.0, &mut rng));
        let (_, w) = mha.forward(&mut tape, &params, x).unwrap();
        for row in tape.value(w).data().chunks(6) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_only() {
        let mut params = ParamSet::new();
        let bn = BatchNorm::new(&mut params, "bn", 2);
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let mut tape = Tape::new(Mode::Eval, 0);
        let xv = tape.constant(x.clone());
        bn.forward(&mut tape, &mut params, xv).unwrap();
        assert_eq!(params[bn.running_mean].value.data(), &[0.0, 0.0]);
        let mut tape = Tape::new(Mode::Train, 0);
        let xv = tape.constant(x);
        bn.forward(&mut tape, &mut params, xv).unwrap();
        let rm = params[bn.running_mean].value.data();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 1.5).abs() < 1e-12);
        // unbiased batch variance of {1, 3} is 2
        let rv = params[bn.running_var].value.data();
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
