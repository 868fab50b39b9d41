use crate::error::{shape_err, Result};
use crate::tensor::{cast, Element, Tensor};

use super::tape::{Backward, BackwardCtx, Tape, Var};

struct Relu;

impl<T: Element> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        // Subgradient at exactly zero is zero.
        let g = ctx.inputs[0].zip_map(ctx.grad_out, |x, g| if x > T::zero() { g } else { T::zero() })?;
        Ok(vec![Some(g)])
    }
}

struct Sigmoid;

impl<T: Element> Backward<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.output.zip_map(ctx.grad_out, |s, g| g * s * (T::one() - s))?;
        Ok(vec![Some(g)])
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Add;

impl<T: Element> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out;
        Ok(vec![ctx.needs[0].then(|| g.clone()), ctx.needs[1].then(|| g.clone())])
    }
}

struct Mul;

impl<T: Element> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
        Ok(vec![
            ctx.needs[0].then(|| b.zip_map(g, |b, g| b * g)).transpose()?,
            ctx.needs[1].then(|| a.zip_map(g, |a, g| a * g)).transpose()?,
        ])
    }
}

struct Sum;

impl<T: Element> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out.item()?;
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))])
    }
}

struct WeightedSum {
    weights: Vec<f64>,
}

impl<T: Element> Backward<T> for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out.item()?;
        Ok(self
            .weights
            .iter()
            .zip(ctx.needs)
            .map(|(&w, &need)| need.then(|| Tensor::scalar(g * cast::<T>(w))))
            .collect())
    }
}

impl<T: Element> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(out, &[x], Relu)
    }

    /// Logistic function, evaluated without overflow for large `|x|`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_scalar);
        self.push_op(out, &[x], Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |a, b| a + b)?;
        self.push_op(out, &[a, b], Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |a, b| a * b)?;
        self.push_op(out, &[a, b], Mul)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, &[x], Sum)
    }

    /// `sum_i w_i * s_i` over scalar values `s_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(shape_err!("weighted_sum term with shape {:?}", t.shape()));
            }
            total += t.data()[0] * cast::<T>(w);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        self.push_op(Tensor::scalar(total), &inputs, WeightedSum { weights })
    }
}
