use crate::autodiff::{Backward, BackwardContext, Tape, Var};
use crate::error::{fmt_shape, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Where normalization statistics come from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Per-channel batch mean and biased variance (training).
    Batch,
    /// Stored running estimates (evaluation).
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training batch.
#[derive(Clone, Debug)]
pub struct BatchStatistics<T> {
    pub mean: Vec<T>,
    pub biased_var: Vec<T>,
    /// Bessel-corrected variance; equals `biased_var` when the channel holds one value.
    pub unbiased_var: Vec<T>,
}

struct BatchNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    plane: usize,
    batch: usize,
    batch_stats: bool,
}

impl<T: Element> BatchNormOp<T> {
    fn channel_slices(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        (0..self.batch).flat_map(move |n| {
            (0..self.channels).map(move |c| {
                let start = (n * self.channels + c) * self.plane;
                (c, start..start + self.plane)
            })
        })
    }
}

impl<T: Element> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let gamma = ctx.input(1).data();
        let mut sum_g = vec![T::zero(); self.channels];
        let mut sum_g_xhat = vec![T::zero(); self.channels];
        for (c, range) in self.channel_slices() {
            for i in range {
                sum_g[c] = sum_g[c] + g[i];
                sum_g_xhat[c] = sum_g_xhat[c] + g[i] * self.xhat[i];
            }
        }

        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = vec![T::zero(); g.len()];
            let count = T::from_usize(self.batch * self.plane).unwrap();
            for (c, range) in self.channel_slices() {
                let k = gamma[c] * self.inv_std[c];
                if self.batch_stats {
                    // dx = γ·σ⁻¹/M · (M·g − Σg − x̂·Σ(g·x̂))
                    let mean_g = sum_g[c] / count;
                    let mean_gx = sum_g_xhat[c] / count;
                    for i in range {
                        dx[i] = k * (g[i] - mean_g - self.xhat[i] * mean_gx);
                    }
                } else {
                    for i in range {
                        dx[i] = k * g[i];
                    }
                }
            }
            dx
        });
        vec![dx, ctx.needs_grad(1).then_some(sum_g_xhat), ctx.needs_grad(2).then_some(sum_g)]
    }
}

impl<T: Element> Tape<T> {
    /// Per-channel normalization of `(N,C,H,W)` followed by `γ·x̂ + β`.
    ///
    /// With [`NormStats::Batch`] the batch statistics are returned so the
    /// caller can update its running estimates.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStatistics<T>>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("batch_norm2d needs a 4-D input, got {}", fmt_shape(&xs)));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return shape_err(format!("batch_norm2d {what} must have shape ({c}), got {}", fmt_shape(self.shape(v))));
            }
        }
        let eps_t = T::from_f64_lossy(eps);
        let data = self.value(x).data();
        let count = n * plane;

        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if count == 0 {
                    return shape_err("batch_norm2d in training mode needs N·H·W ≥ 1");
                }
                let total = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    // shift by the first value so a constant channel has an exact mean
                    let pivot = data[ch * plane];
                    let mut shifted = T::zero();
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        shifted = data[start..start + plane].iter().fold(shifted, |acc, &v| acc + (v - pivot));
                    }
                    mean[ch] = pivot + shifted / total;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        sq = data[start..start + plane].iter().fold(sq, |acc, &v| acc + (v - mean[ch]) * (v - mean[ch]));
                    }
                    var[ch] = sq / total;
                }
                let unbiased = if count > 1 {
                    let factor = total / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v * factor).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStatistics { mean: mean.clone(), biased_var: var.clone(), unbiased_var: unbiased };
                (mean, var, Some(stats))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!(
                        "running statistics hold {} / {} channels, input has {c}",
                        mean.len(),
                        var.len()
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::from_vec(out, &xs)?;
        let op = BatchNormOp { xhat, inv_std, channels: c, plane, batch: n, batch_stats: batch_stats.is_some() };
        Ok((self.record(out, &[x, gamma, beta], Box::new(op)), batch_stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_yields_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 0.1));
        let gamma = tape.constant(Tensor::full(&[1], 2.0));
        let beta = tape.constant(Tensor::full(&[1], 0.7));
        let (y, stats) = tape.batch_norm2d(x, gamma, beta, NormStats::Batch, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
        assert_eq!(stats.unwrap().biased_var, vec![0.0]);
    }

    #[test]
    fn running_identity() {
        let mut tape = Tape::<f64>::new();
        let values: Vec<f64> = (0..16).map(|v| v as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(Tensor::from_vec(values.clone(), &[1, 2, 2, 4]).unwrap());
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let (mean, var) = ([0.0; 2], [1.0; 2]);
        let (y, stats) = tape
            .batch_norm2d(x, gamma, beta, NormStats::Running { mean: &mean, var: &var }, 1e-12)
            .unwrap();
        assert!(stats.is_none());
        for (a, b) in tape.value(y).data().iter().zip(&values) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
