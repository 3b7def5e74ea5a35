use super::norm::softmax_in_place;
use super::{GradSink, Op, Tape, Values, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[1] == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects logits [B, K] with B = {} labels, got {ls:?}",
                labels.len()
            )));
        }
        let (b, k) = (ls[0], ls[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!(
                "label {l} of sample {i} outside [0, {k})"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, (pr, &l)) in probs.chunks_mut(k).zip(labels).enumerate() {
            let lr = &self.value(logits).data()[row * k..(row + 1) * k];
            let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - lr[l];
            softmax_in_place(pr);
        }
        let out = Tensor::scalar(loss / b.max(1) as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }
}

pub(super) fn backward(op: &Op, _val: &Values, g: Vec<f64>, sink: &mut GradSink) {
    let Op::CrossEntropy {
        logits,
        ref labels,
        ref probs,
    } = *op
    else {
        unreachable!("not a loss op")
    };
    let b = labels.len().max(1);
    let k = probs.len() / b;
    let scale = g[0] / b as f64;
    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for (row, &l) in labels.iter().enumerate() {
        gl[row * k + l] -= scale;
    }
    sink.add(logits, gl);
}
