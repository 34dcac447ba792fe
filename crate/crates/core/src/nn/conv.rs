//! 2-D convolution via im2col + GEMM.

use crate::autodiff::{Backward, BackwardContext, Tape, Var};
use crate::error::{fmt_shape, shape_err, Result};
use crate::tensor::{gemm, Element, Strides, Tensor};

/// Output extent of a strided, zero-padded window sweep:
/// `floor((input + 2·padding − kernel) / stride) + 1`.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return shape_err(format!("kernel ({kernel}) and stride ({stride}) must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return shape_err(format!("kernel extent {kernel} exceeds padded input extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Stride and zero-padding of a convolution, as (height, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeometry { stride: (stride, stride), padding: (padding, padding) }
    }
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: Conv2dGeometry,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }

    /// 1×1, stride 1, no padding: the input image already is its column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == (1, 1) && self.geom.padding == (0, 0)
    }
}

/// Unfolds one `(C,H,W)` image into a `(C·KH·KW, OH·OW)` column matrix.
fn im2col<T: Element>(img: &[T], d: &ConvDims, cols: &mut [T]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let plane = d.out_plane();
    for c in 0..d.c {
        let src = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= d.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
fn col2im<T: Element>(cols: &[T], d: &ConvDims, img: &mut [T]) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    let plane = d.out_plane();
    for c in 0..d.c {
        let dst = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    dims: ConvDims,
    has_bias: bool,
}

impl<T: Element> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let d = &self.dims;
        let x = ctx.input(0).data();
        let w = ctx.input(1).data();
        let (patch, plane) = (d.patch(), d.out_plane());
        let out_image = d.o * plane;

        let want_x = ctx.needs_grad(0);
        let want_w = ctx.needs_grad(1);
        let want_b = self.has_bias && ctx.needs_grad(2);

        let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
        let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
        let mut cols = if d.pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
        let mut dcols = if want_x && !d.pointwise() { vec![T::zero(); patch * plane] } else { Vec::new() };

        for n in 0..d.n {
            let img = &x[n * d.in_image()..(n + 1) * d.in_image()];
            let gy = &g[n * out_image..(n + 1) * out_image];
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[T] = if d.pointwise() {
                    img
                } else {
                    im2col(img, d, &mut cols);
                    &cols
                };
                // dW += gy · colsᵀ
                gemm(d.o, plane, patch, T::one(), gy, Strides::row_major(plane), cols_ref, Strides::transposed(plane), T::one(), dw, Strides::row_major(patch));
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx[n * d.in_image()..(n + 1) * d.in_image()];
                if d.pointwise() {
                    gemm(patch, d.o, plane, T::one(), w, Strides::transposed(patch), gy, Strides::row_major(plane), T::zero(), dimg, Strides::row_major(plane));
                } else {
                    // dcols = Wᵀ · gy
                    gemm(patch, d.o, plane, T::one(), w, Strides::transposed(patch), gy, Strides::row_major(plane), T::zero(), &mut dcols, Strides::row_major(plane));
                    col2im(&dcols, d, dimg);
                }
            }
        }

        let db = want_b.then(|| {
            let mut db = vec![T::zero(); d.o];
            for n in 0..d.n {
                for (o, acc) in db.iter_mut().enumerate() {
                    let start = n * out_image + o * plane;
                    *acc = *acc + g[start..start + plane].iter().copied().sum::<T>();
                }
            }
            db
        });

        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(db);
        }
        out
    }
}

impl<T: Element> Tape<T> {
    /// `(N,C,H,W) ⊛ (O,C,KH,KW) [+ bias (O)] → (N,O,OH,OW)` with zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: Conv2dGeometry) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d needs 4-D input and kernel, got {} and {}", fmt_shape(xs), fmt_shape(ws)));
        }
        if xs[1] != ws[1] {
            return shape_err(format!(
                "conv2d channel mismatch: input {} has {} channels, kernel {} expects {}",
                fmt_shape(xs),
                xs[1],
                fmt_shape(ws),
                ws[1]
            ));
        }
        let oh = output_extent(xs[2], ws[2], geom.stride.0, geom.padding.0)?;
        let ow = output_extent(xs[3], ws[3], geom.stride.1, geom.padding.1)?;
        let dims = ConvDims { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], kh: ws[2], kw: ws[3], oh, ow, geom };
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [dims.o] {
                return shape_err(format!("conv2d bias must have shape ({}), got {}", dims.o, fmt_shape(self.shape(b))));
            }
        }

        let (patch, plane) = (dims.patch(), dims.out_plane());
        let xdata = self.value(x).data();
        let wdata = self.value(weight).data();
        let mut out = vec![T::zero(); dims.n * dims.o * plane];
        let mut cols = if dims.pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
        for n in 0..dims.n {
            let img = &xdata[n * dims.in_image()..(n + 1) * dims.in_image()];
            let cols_ref: &[T] = if dims.pointwise() {
                img
            } else {
                im2col(img, &dims, &mut cols);
                &cols
            };
            let y = &mut out[n * dims.o * plane..(n + 1) * dims.o * plane];
            gemm(dims.o, patch, plane, T::one(), wdata, Strides::row_major(patch), cols_ref, Strides::row_major(plane), T::zero(), y, Strides::row_major(plane));
            if let Some(b) = bias {
                for (o, &bo) in self.value(b).data().iter().enumerate() {
                    y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        }
        let out = Tensor::from_vec(out, &[dims.n, dims.o, oh, ow])?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(out, &inputs, Box::new(Conv2dOp { dims, has_bias: bias.is_some() })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_dot_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap());
        let k = tape.constant(Tensor::from_vec(vec![1., 0., 0., 1.], &[1, 1, 2, 2]).unwrap());
        let y = tape.conv2d(x, k, None, Conv2dGeometry::new(1, 0)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.]);
    }

    #[test]
    fn identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..18).map(|v| v as f32 * 0.5 - 3.0).collect();
        let x = tape.constant(Tensor::from_vec(data.clone(), &[2, 1, 3, 3]).unwrap());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, Some(b), Conv2dGeometry::default()).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn size_formula() {
        assert_eq!(output_extent(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(output_extent(224, 11, 4, 2).unwrap(), 55);
        assert!(output_extent(2, 5, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 5, 5]));
        let k = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(tape.conv2d(x, k, None, Conv2dGeometry::default()).is_err());
        let big = tape.constant(Tensor::zeros(&[2, 3, 7, 7]));
        assert!(tape.conv2d(x, big, None, Conv2dGeometry::default()).is_err());
    }
}
