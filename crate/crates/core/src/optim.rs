//! Adam with a polynomial learning-rate decay and coupled L2 on kernels.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::network::{ParamKind, ParameterStore};
use crate::tensor::{cast, Element, Tensor};

pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha0: f64,
    pub total_epochs: usize,
    pub l2_weight: f64,
    /// Apply L2 to 1x1x1 kernels as well as 3x3x3 ones.
    pub l2_pointwise: bool,
    pub adam: AdamConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { alpha0: 1e-4, total_epochs: 300, l2_weight: 1e-5, l2_pointwise: true, adam: AdamConfig::default() }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0) || !self.alpha0.is_finite() {
            return Err(Error::Config(format!("alpha0 must be > 0, got {}", self.alpha0)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(Error::Config(format!("l2_weight must be >= 0, got {}", self.l2_weight)));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {a:?}")));
        }
        Ok(())
    }
}

/// `alpha0 * (1 - e / N_e)^0.9`.
pub fn poly_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if cfg.total_epochs == 0 || epoch > cfg.total_epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside [0, {}]", cfg.total_epochs)));
    }
    Ok(cfg.alpha0 * (1.0 - epoch as f64 / cfg.total_epochs as f64).powf(POLY_POWER))
}

/// `grad += 2 * lambda * w` for every convolution kernel.
pub fn apply_l2<T: Element>(
    params: &ParameterStore<T>,
    grads: &mut [Tensor<T>],
    lambda: f64,
    include_pointwise: bool,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::MissingGradient(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    if lambda == 0.0 {
        return Ok(());
    }
    let k = cast::<T>(2.0 * lambda);
    for (p, g) in params.params.iter().zip(grads.iter_mut()) {
        let wanted = match p.kind {
            ParamKind::ConvKernel => true,
            ParamKind::PointwiseKernel => include_pointwise,
            _ => false,
        };
        if wanted {
            p.value.expect_same_shape(g)?;
            for (gv, &wv) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gv = *gv + k * wv;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParameterStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamState { config, t: 0, m: zeros(), v: zeros() }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.t == other.t
            && self.m.len() == other.m.len()
            && self.m.iter().zip(&other.m).all(|(a, b)| a.bitwise_eq(b))
            && self.v.iter().zip(&other.v).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the step before
/// anything is modified.
pub fn adam_step<T: Element>(
    params: &mut ParameterStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (p, g) in params.params.iter().zip(grads) {
        p.value.expect_same_shape(g)?;
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t + 1;
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for (i, p) in params.params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g.as_f64();
            let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
            let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
            m[j] = cast(mj);
            v[j] = cast(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            *w = cast(w.as_f64() - update);
        }
    }
    state.t = t;
    Ok(())
}
