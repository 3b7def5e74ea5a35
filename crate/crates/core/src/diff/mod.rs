//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation executed through it, in execution
//! order. Values are addressed by [`Var`] handles. Trainable state lives in a
//! [`ParamSet`]; [`Tape::param`] copies a parameter onto the tape and
//! [`Tape::backward`] accumulates gradients back into the set, then clears
//! the tape.
//!
//! ```
//! use neurophys::diff::{Mode, ParamSet, Tape};
//! use neurophys::Tensor;
//!
//! let mut params = ParamSet::new();
//! let x = params.add("x", Tensor::scalar(3.0), true);
//! let mut tape = Tape::new(Mode::Eval, 0);
//! let xv = tape.param(&params, x);
//! let loss = tape.powi(xv, 2);
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(params[x].grad.item(), 6.0);
//! ```

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod loss;
mod norm;

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Forward-pass behaviour of dropout and batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Non-trainable entries are buffers (running statistics) or frozen
    /// weights; they never receive gradients or optimizer updates.
    pub trainable: bool,
}

/// Ordered, named collection of parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) && !is_buffer_name(&p.name) {
                p.trainable = trainable;
            }
        }
    }
}

/// Running statistics are stored under names ending in these suffixes.
pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl Index<ParamId> for ParamSet {
    type Output = Parameter;
    fn index(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }
}

impl IndexMut<ParamId> for ParamSet {
    fn index_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }
}

/// Recorded operation together with whatever the backward rule needs.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Second operand matches the trailing dimensions of the first.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powi(Var, i32),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MixAxis {
        x: Var,
        matrix: Tensor,
        axis: usize,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        pad: (usize, usize),
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of executed operations.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl Tape {
    /// `seed` drives dropout masks in [`Mode::Train`].
    pub fn new(mode: Mode, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input: never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy parameter `id` onto the tape.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = &params[id];
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad: p.trainable,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Propagate d`loss` back through the tape, accumulate into the trainable
    /// parameters of `params`, and clear the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                let p = &mut params[id];
                if p.trainable {
                    for (acc, d) in p.grad.data_mut().iter_mut().zip(&g) {
                        *acc += d;
                    }
                }
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backward_op(&self.nodes, &node.op, &node.value, g, &mut sink);
        }
        self.nodes.clear();
        Ok(())
    }
}

/// Accumulates input gradients during the backward sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&g) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn backward_op(nodes: &[Node], op: &Op, out: &Tensor, g: Vec<f64>, sink: &mut GradSink) {
    let val = Values(nodes);
    match op {
        Op::Leaf => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::AddBroadcast(..)
        | Op::Scale(..)
        | Op::AddScalar(..)
        | Op::Powi(..)
        | Op::Reshape(..)
        | Op::Permute(..)
        | Op::Narrow { .. }
        | Op::Relu(..)
        | Op::Dropout { .. }
        | Op::Sum(..)
        | Op::Mean(..)
        | Op::MeanAxis { .. } => elementwise::backward(op, &val, g, sink),
        Op::MixAxis { .. } | Op::MatMul(..) | Op::Linear { .. } => {
            linalg::backward(op, &val, g, sink)
        }
        Op::Conv2d { .. } | Op::MaxPool2d { .. } => conv::backward(op, &val, out, g, sink),
        Op::Softmax(..) | Op::LayerNorm { .. } | Op::BatchNorm { .. } => {
            norm::backward(op, &val, out, g, sink)
        }
        Op::CrossEntropy { .. } => loss::backward(op, &val, g, sink),
    }
}

/// Read access to recorded values during the backward sweep.
pub(crate) struct Values<'a>(&'a [Node]);

impl<'a> Values<'a> {
    pub(crate) fn get(&self, v: Var) -> &'a Tensor {
        &self.0[v.0].value
    }
}

pub(crate) fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
}
