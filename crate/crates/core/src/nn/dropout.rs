use rand::Rng;

use crate::autodiff::{Backward, BackwardContext, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct DropoutOp<T> {
    /// 0 for dropped entries, `1/(1−rate)` for survivors.
    mask: Vec<T>,
}

impl<T: Element> Backward<T> for DropoutOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect())]
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Inverted dropout. With `train == false` or `rate == 0` the input is
    /// returned unchanged; otherwise each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1−rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        self.check(x)?;
        check_rate(rate)?;
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let input = self.value(x);
        let mask: Vec<T> = (0..input.len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(data, input.shape())?;
        Ok(self.record(out, &[x], Box::new(DropoutOp { mask })))
    }
}
