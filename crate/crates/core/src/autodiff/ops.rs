//! Elementwise, reduction, and matrix operations on the tape.

use crate::autodiff::tape::{Backward, BackwardContext, Tape, Var};
use crate::error::{fmt_shape, shape_err, Result};
use crate::tensor::{gemm, num_elements, Element, Strides, Tensor};

struct AddOp;

impl<T: Element> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![ctx.needs_grad(0).then(|| g.to_vec()), ctx.needs_grad(1).then(|| g.to_vec())]
    }
}

struct MulOp;

impl<T: Element> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let a = ctx.input(0).data();
        let b = ctx.input(1).data();
        vec![
            ctx.needs_grad(0).then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            ctx.needs_grad(1).then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct ScaleOp<T> {
    factor: T,
}

impl<T: Element> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&g| g * self.factor).collect())]
    }
}

struct SumOp<T> {
    len: usize,
    factor: T,
}

impl<T: Element> Backward<T> for SumOp<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0] * self.factor; self.len])]
    }
}

struct ReluOp;

impl<T: Element> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = ctx.input(0).data();
        // derivative at exactly zero is zero
        vec![Some(g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect())]
    }
}

struct MatMulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Element> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = ctx.input(0).data();
        let b = ctx.input(1).data();
        let da = ctx.needs_grad(0).then(|| {
            // da = g · bᵀ
            let mut da = vec![T::zero(); m * k];
            gemm(m, n, k, T::one(), g, Strides::row_major(n), b, Strides::transposed(n), T::zero(), &mut da, Strides::row_major(k));
            da
        });
        let db = ctx.needs_grad(1).then(|| {
            // db = aᵀ · g
            let mut db = vec![T::zero(); k * n];
            gemm(k, m, n, T::one(), a, Strides::transposed(k), g, Strides::row_major(n), T::zero(), &mut db, Strides::row_major(n));
            db
        });
        vec![da, db]
    }
}

struct ReshapeOp;

impl<T: Element> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct ConcatOp {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.extents.len());
        for (k, &extent) in self.extents.iter().enumerate() {
            let chunk = extent * self.inner;
            if ctx.needs_grad(k) {
                let mut gk = Vec::with_capacity(self.outer * chunk);
                for o in 0..self.outer {
                    let start = o * total * self.inner + offset * self.inner;
                    gk.extend_from_slice(&g[start..start + chunk]);
                }
                out.push(Some(gk));
            } else {
                out.push(None);
            }
            offset += extent;
        }
        out
    }
}

fn same_shape<T: Element>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    tape.check(a)?;
    tape.check(b)?;
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!(
            "{what} needs identical shapes, got {} and {}",
            fmt_shape(tape.shape(a)),
            fmt_shape(tape.shape(b))
        ));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Elementwise sum of two equally shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(data, x.shape())?;
        Ok(self.record(out, &[a, b], Box::new(AddOp)))
    }

    /// Elementwise product of two equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(data, x.shape())?;
        Ok(self.record(out, &[a, b], Box::new(MulOp)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let factor = T::from_f64_lossy(factor);
        let out = self.value(a).map(|v| v * factor);
        Ok(self.record(out, &[a], Box::new(ScaleOp { factor })))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let total: T = x.data().iter().copied().sum();
        let len = x.len();
        Ok(self.record(Tensor::scalar(total), &[a], Box::new(SumOp { len, factor: T::one() })))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let len = x.len();
        if len == 0 {
            return shape_err("mean of an empty tensor");
        }
        let factor = T::one() / T::from_usize(len).expect("length fits the element type");
        let total: T = x.data().iter().copied().sum();
        Ok(self.record(Tensor::scalar(total * factor), &[a], Box::new(SumOp { len, factor })))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.record(out, &[a], Box::new(ReluOp)))
    }

    /// `(m,k) · (k,n) → (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul cannot combine {} and {}", fmt_shape(sa), fmt_shape(sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let out = Tensor::from_vec(out, &[m, n])?;
        Ok(self.record(out, &[a, b], Box::new(MatMulOp { m, k, n })))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(out, &[a], Box::new(ReshapeOp)))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a);
        if shape.is_empty() {
            return shape_err("flatten needs at least one axis");
        }
        let rest = num_elements(&shape[1..]);
        let n = shape[0];
        self.reshape(a, &[n, rest])
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat needs at least one input");
        };
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {}", fmt_shape(&base)));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return shape_err(format!(
                    "concat along axis {axis} cannot join {} with {}",
                    fmt_shape(&base),
                    fmt_shape(s)
                ));
            }
            extents.push(s[axis]);
        }
        let outer = num_elements(&base[..axis]);
        let inner = num_elements(&base[axis + 1..]);
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &extent) in parts.iter().zip(&extents) {
                let chunk = extent * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(data, &shape)?;
        Ok(self.record(out, parts, Box::new(ConcatOp { outer, inner, extents })))
    }
}
