use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{cast, Element, Tensor};

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Mode;

struct SpatialDropout<T> {
    /// Per `(n, c)`: `0` for dropped channels, `1 / (1 - rate)` otherwise.
    scale: Vec<T>,
    voxels: usize,
}

impl<T: Element> Backward<T> for SpatialDropout<T> {
    fn name(&self) -> &'static str {
        "spatial_dropout"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(apply(ctx.grad_out, &self.scale, self.voxels))])
    }
}

fn apply<T: Element>(x: &Tensor<T>, scale: &[T], voxels: usize) -> Tensor<T> {
    let mut out = x.clone();
    for (chunk, &s) in out.data_mut().chunks_mut(voxels).zip(scale) {
        chunk.iter_mut().for_each(|v| *v = *v * s);
    }
    out
}

impl<T: Element> Tape<T> {
    /// Zero whole channels with probability `rate` in train mode, scaling the
    /// survivors by `1 / (1 - rate)`. Identity in eval mode.
    pub fn spatial_dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let dims = self.value(x).dims5()?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = cast::<T>(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..dims[0] * dims[1])
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let voxels = dims[2] * dims[3] * dims[4];
        let out = apply(self.value(x), &scale, voxels);
        self.push_op(out, &[x], SpatialDropout { scale, voxels })
    }
}
