//! Trilinear 2x upsampling with the half-pixel (align_corners = false)
//! convention: destination `i` samples source coordinate `(i + 0.5) / 2 - 0.5`,
//! clamped to the valid range.

use crate::error::Result;
use crate::tensor::{cast, Element, Tensor};

use super::tape::{Backward, BackwardCtx, Tape, Var};

/// Source taps `(lo, hi, w_lo, w_hi)` for each destination index of a
/// 2x-upsampled axis of length `n`.
pub(crate) fn axis_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// `[outer][n][inner]` -> `[outer][2n][inner]`.
fn upsample_axis<T: Element>(src: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let taps = axis_taps(n);
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        let s = &src[o * n * inner..][..n * inner];
        let d = &mut out[o * 2 * n * inner..][..2 * n * inner];
        for (i, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
            let (wl, wh) = (cast::<T>(wl), cast::<T>(wh));
            let dst = &mut d[i * inner..][..inner];
            let (a, b) = (&s[lo * inner..][..inner], &s[hi * inner..][..inner]);
            for ((v, &x0), &x1) in dst.iter_mut().zip(a).zip(b) {
                *v = wl * x0 + wh * x1;
            }
        }
    }
    out
}

/// Transpose of [`upsample_axis`]: `[outer][2n][inner]` -> `[outer][n][inner]`.
fn upsample_axis_t<T: Element>(grad: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let taps = axis_taps(n);
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let g = &grad[o * 2 * n * inner..][..2 * n * inner];
        let d = &mut out[o * n * inner..][..n * inner];
        for (i, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
            let (wl, wh) = (cast::<T>(wl), cast::<T>(wh));
            let src = &g[i * inner..][..inner];
            for (j, &v) in src.iter().enumerate() {
                d[lo * inner + j] += wl * v;
            }
            for (j, &v) in src.iter().enumerate() {
                d[hi * inner + j] += wh * v;
            }
        }
    }
    out
}

pub fn upsample_trilinear2x_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let nc = n * c;
    let a = upsample_axis(x.data(), nc * d * h, w, 1);
    let b = upsample_axis(&a, nc * d, h, 2 * w);
    let out = upsample_axis(&b, nc, d, 4 * h * w);
    Tensor::new(vec![n, c, 2 * d, 2 * h, 2 * w], out)
}

struct Upsample2x;

impl<T: Element> Backward<T> for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_trilinear2x"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let [n, c, d, h, w] = x.dims5()?;
        let nc = n * c;
        let b = upsample_axis_t(ctx.grad_out.data(), nc, d, 4 * h * w);
        let a = upsample_axis_t(&b, nc * d, h, 2 * w);
        let g = upsample_axis_t(&a, nc * d * h, w, 1);
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), g)?)])
    }
}

impl<T: Element> Tape<T> {
    /// `[N, C, D, H, W]` -> `[N, C, 2D, 2H, 2W]`.
    pub fn upsample_trilinear2x(&mut self, x: Var) -> Result<Var> {
        let out = upsample_trilinear2x_forward(self.value(x))?;
        self.push_op(out, &[x], Upsample2x)
    }
}
