//! Central finite-difference check of tape gradients.
//!
//! The finite-difference side only ever evaluates forward values, so it is
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative errors are taken against `max(|analytic|, |numeric|, ABS_FLOOR)`.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Check at most this many elements per input (chosen at random).
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-5, max_elements: None, seed: 0 }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compare gradients of the scalar `f(tape, vars)` w.r.t. each of `inputs`
/// against central differences.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Argument("gradcheck function must return a scalar".into()));
    }
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut values = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let numel = inputs[i].numel();
        let analytic = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let elems: Vec<usize> = match opts.max_elements {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for e in elems {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + opts.step;
            let plus = eval(&values)?;
            values[i].data_mut()[e] = orig - opts.step;
            let minus = eval(&values)?;
            values[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        use crate::autodiff::{Backward, BackwardCtx};
        // y = x^2 with a deliberately wrong backward (returns x instead of 2x).
        struct Bad;
        impl Backward<f64> for Bad {
            fn name(&self) -> &'static str {
                "bad"
            }
            fn backward(&self, ctx: &BackwardCtx<'_, f64>) -> Result<Vec<Option<Tensor<f64>>>> {
                Ok(vec![Some(ctx.inputs[0].zip_map(ctx.grad_out, |x, g| x * g)?)])
            }
        }
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let rep = gradcheck(
            &[x],
            |t, v| {
                let sq = t.value(v[0]).map(|a| a * a);
                let y = t.push_op(sq, &[v[0]], Bad)?;
                t.sum(y)
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err > 0.4);
    }
}
