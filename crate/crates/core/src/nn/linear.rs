use crate::autodiff::{Backward, BackwardContext, Tape, Var};
use crate::error::{fmt_shape, shape_err, Result};
use crate::tensor::{gemm, Element, Strides, Tensor};

struct LinearOp {
    n: usize,
    d_in: usize,
    d_out: usize,
    has_bias: bool,
}

impl<T: Element> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, d_in, d_out) = (self.n, self.d_in, self.d_out);
        let x = ctx.input(0).data();
        let w = ctx.input(1).data();
        let dx = ctx.needs_grad(0).then(|| {
            // dx = g · W
            let mut dx = vec![T::zero(); n * d_in];
            gemm(n, d_out, d_in, T::one(), g, Strides::row_major(d_out), w, Strides::row_major(d_in), T::zero(), &mut dx, Strides::row_major(d_in));
            dx
        });
        let dw = ctx.needs_grad(1).then(|| {
            // dW = gᵀ · x
            let mut dw = vec![T::zero(); d_out * d_in];
            gemm(d_out, n, d_in, T::one(), g, Strides::transposed(d_out), x, Strides::row_major(d_in), T::zero(), &mut dw, Strides::row_major(d_in));
            dw
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(ctx.needs_grad(2).then(|| {
                let mut db = vec![T::zero(); d_out];
                for row in g.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                db
            }));
        }
        out
    }
}

impl<T: Element> Tape<T> {
    /// `y = x·Wᵀ + b` for `x (N,d_in)`, `W (d_out,d_in)`, `b (d_out)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear cannot apply weight {} to input {}", fmt_shape(ws), fmt_shape(xs)));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [d_out] {
                return shape_err(format!("linear bias must have shape ({d_out}), got {}", fmt_shape(self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = bias {
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            n,
            d_in,
            d_out,
            T::one(),
            self.value(x).data(),
            Strides::row_major(d_in),
            self.value(weight).data(),
            Strides::transposed(d_in),
            beta,
            &mut out,
            Strides::row_major(d_out),
        );
        let out = Tensor::from_vec(out, &[n, d_out])?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, Box::new(LinearOp { n, d_in, d_out, has_bias: bias.is_some() })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1., 2.], &[1, 2]).unwrap());
        let w = tape.constant(Tensor::from_vec(vec![3., 4.], &[1, 2]).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![5.], &[1]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[16.]);
    }

    #[test]
    fn identity_weights() {
        let mut tape = Tape::<f32>::new();
        let values = vec![1.5, -2., 0.25, 4., 5., 6.];
        let x = tape.constant(Tensor::from_vec(values.clone(), &[2, 3]).unwrap());
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), values.as_slice());
    }

    #[test]
    fn input_width_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.linear(x, w, None).is_err());
    }
}
