use crate::autodiff::{Backward, BackwardContext, Tape, Var};
use crate::error::{fmt_shape, shape_err, Result};
use crate::nn::conv::output_extent;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Divides by the full kernel area, padded cells included.
    Average,
    GlobalAverage,
}

/// Window geometry of a pooling layer. `kernel`, `stride` and `padding` are
/// ignored for [`PoolKind::GlobalAverage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolSpec {
    pub fn max(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec { kind: PoolKind::Max, kernel: (kernel, kernel), stride: (stride, stride), padding: (padding, padding) }
    }

    pub fn average(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolSpec { kind: PoolKind::Average, kernel: (kernel, kernel), stride: (stride, stride), padding: (padding, padding) }
    }

    pub fn global_average() -> Self {
        PoolSpec { kind: PoolKind::GlobalAverage, kernel: (1, 1), stride: (1, 1), padding: (0, 0) }
    }

    /// Output `(H', W')` for an `(H, W)` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kind == PoolKind::GlobalAverage {
            return Ok((1, 1));
        }
        if self.kind == PoolKind::Max && (2 * self.padding.0 > self.kernel.0 || 2 * self.padding.1 > self.kernel.1) {
            return shape_err(format!(
                "max pooling padding {:?} must be at most half the kernel {:?}",
                self.padding, self.kernel
            ));
        }
        Ok((
            output_extent(h, self.kernel.0, self.stride.0, self.padding.0)?,
            output_extent(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

struct MaxPoolOp {
    /// Flat input offset of each output's winning cell.
    argmax: Vec<u32>,
}

impl<T: Element> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); ctx.input(0).len()];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            dx[src as usize] = dx[src as usize] + gv;
        }
        vec![Some(dx)]
    }
}

struct AvgPoolOp {
    spec: PoolSpec,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl<T: Element> Backward<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (h, w) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let mut dx = vec![T::zero(); ctx.input(0).len()];
        let planes = dx.len() / (h * w);
        let area = T::from_usize(self.spec.kernel.0 * self.spec.kernel.1).unwrap();
        for p in 0..planes {
            let dplane = &mut dx[p * h * w..(p + 1) * h * w];
            let gplane = &g[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let share = gplane[oy * ow + ox] / area;
                    for_each_cell(&self.spec, oy, ox, h, w, |iy, ix| {
                        dplane[iy * w + ix] = dplane[iy * w + ix] + share;
                    });
                }
            }
        }
        vec![Some(dx)]
    }
}

struct GlobalAvgPoolOp {
    plane: usize,
}

impl<T: Element> Backward<T> for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool2d"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let scale = T::one() / T::from_usize(self.plane).unwrap();
        let mut dx = Vec::with_capacity(g.len() * self.plane);
        for &gv in g {
            dx.extend(std::iter::repeat_n(gv * scale, self.plane));
        }
        vec![Some(dx)]
    }
}

/// Visits in-bounds cells of window `(oy, ox)` in row-major order.
fn for_each_cell(spec: &PoolSpec, oy: usize, ox: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = (oy * spec.stride.0) as isize - spec.padding.0 as isize;
    let x0 = (ox * spec.stride.1) as isize - spec.padding.1 as isize;
    for ki in 0..spec.kernel.0 as isize {
        let iy = y0 + ki;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kj in 0..spec.kernel.1 as isize {
            let ix = x0 + kj;
            if ix >= 0 && ix < w as isize {
                f(iy as usize, ix as usize);
            }
        }
    }
}

impl<T: Element> Tape<T> {
    /// Max, average, or global-average pooling over `(N,C,H,W)`.
    ///
    /// Max pooling treats padding as −∞ and routes the gradient to the first
    /// maximum of each window in row-major order. Global average returns
    /// `(N,C,1,1)`.
    pub fn pool2d(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("pool2d needs a 4-D input, got {}", fmt_shape(&xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = spec.output_hw(h, w)?;
        let data = self.value(x).data();
        let planes = n * c;

        match spec.kind {
            PoolKind::GlobalAverage => {
                let plane = h * w;
                let scale = T::one() / T::from_usize(plane).unwrap();
                let out: Vec<T> = data.chunks(plane).map(|p| p.iter().copied().sum::<T>() * scale).collect();
                let out = Tensor::from_vec(out, &[n, c, 1, 1])?;
                Ok(self.record(out, &[x], Box::new(GlobalAvgPoolOp { plane })))
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(planes * oh * ow);
                let mut argmax = Vec::with_capacity(planes * oh * ow);
                for p in 0..planes {
                    let plane = &data[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_at = usize::MAX;
                            for_each_cell(spec, oy, ox, h, w, |iy, ix| {
                                let v = plane[iy * w + ix];
                                if best_at == usize::MAX || v > best {
                                    best = v;
                                    best_at = iy * w + ix;
                                }
                            });
                            out.push(best);
                            argmax.push((p * h * w + best_at) as u32);
                        }
                    }
                }
                let out = Tensor::from_vec(out, &[n, c, oh, ow])?;
                Ok(self.record(out, &[x], Box::new(MaxPoolOp { argmax })))
            }
            PoolKind::Average => {
                let area = T::from_usize(spec.kernel.0 * spec.kernel.1).unwrap();
                let mut out = Vec::with_capacity(planes * oh * ow);
                for p in 0..planes {
                    let plane = &data[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for_each_cell(spec, oy, ox, h, w, |iy, ix| acc = acc + plane[iy * w + ix]);
                            out.push(acc / area);
                        }
                    }
                }
                let out = Tensor::from_vec(out, &[n, c, oh, ow])?;
                Ok(self.record(out, &[x], Box::new(AvgPoolOp { spec: *spec, in_hw: (h, w), out_hw: (oh, ow) })))
            }
        }
    }
}
