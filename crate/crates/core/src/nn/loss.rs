use crate::autodiff::{Backward, BackwardContext, Tape, Var};
use crate::error::{fmt_shape, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

struct SoftmaxCrossEntropyOp<T> {
    probs: Vec<T>,
    targets: Vec<usize>,
    classes: usize,
}

impl<T: Element> Backward<T> for SoftmaxCrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let n = self.targets.len();
        let scale = g[0] / T::from_usize(n).unwrap();
        let mut dx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &t) in self.targets.iter().enumerate() {
            dx[i * self.classes + t] = dx[i * self.classes + t] - scale;
        }
        vec![Some(dx)]
    }
}

/// Row-wise softmax with the max-shift.
pub fn softmax<T: Element>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

impl<T: Element> Tape<T> {
    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `(N,K)` logits, computed through log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return shape_err(format!(
                "softmax_cross_entropy needs (N,K) logits with N = {} ≥ 1 targets, got {}",
                targets.len(),
                fmt_shape(shape)
            ));
        }
        let classes = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(format!("target class {bad} out of range for {classes} classes")));
        }
        let data = self.value(logits).data();
        let mut total = T::zero();
        for (row, &t) in data.chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + (lse - row[t]);
        }
        let loss = total / T::from_usize(targets.len()).unwrap();
        let probs = softmax(data, classes);
        let op = SoftmaxCrossEntropyOp { probs, targets: targets.to_vec(), classes };
        Ok(self.record(Tensor::scalar(loss), &[logits], Box::new(op)))
    }
}
