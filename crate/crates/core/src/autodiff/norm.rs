//! Group, instance and batch normalization.
//!
//! Statistics are accumulated in `f64` regardless of the element type.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{cast, spatial_len, Element, Tensor};

use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::Mode;

fn check_affine<T: Element>(gamma: &Tensor<T>, beta: &Tensor<T>, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "affine parameters {:?}/{:?} for {} channels",
            gamma.shape(),
            beta.shape(),
            c
        ));
    }
    Ok(())
}

fn mean_var(values: impl Iterator<Item = f64> + Clone, count: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / count as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    (mean, var)
}

struct GroupNormOp {
    groups: usize,
    /// Per `(n, group)`.
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

impl<T: Element> Backward<T> for GroupNormOp {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let [n, c, ..] = x.dims5()?;
        let s = spatial_len(&x.dims5()?);
        let cg = c / self.groups;
        let m = (cg * s) as f64;
        let (xd, dy) = (x.data(), ctx.grad_out.data());
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); xd.len()]);
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ni in 0..n {
            for g in 0..self.groups {
                let (mu, rstd) = (self.mean[ni * self.groups + g], self.rstd[ni * self.groups + g]);
                let base = (ni * c + g * cg) * s;
                let (mut s1, mut s2) = (0.0, 0.0);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let gm = gamma[ch].as_f64();
                    for i in base + ci * s..base + (ci + 1) * s {
                        let xhat = (xd[i].as_f64() - mu) * rstd;
                        let d = dy[i].as_f64();
                        dgamma[ch] += d * xhat;
                        dbeta[ch] += d;
                        s1 += d * gm;
                        s2 += d * gm * xhat;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let (k1, k2) = (s1 / m, s2 / m);
                    for ci in 0..cg {
                        let gm = gamma[g * cg + ci].as_f64();
                        for i in base + ci * s..base + (ci + 1) * s {
                            let xhat = (xd[i].as_f64() - mu) * rstd;
                            dx[i] = cast(rstd * (dy[i].as_f64() * gm - k1 - xhat * k2));
                        }
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(cast).collect());
        Ok(vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
            ctx.needs[1].then(|| to_t(dgamma)).transpose()?,
            ctx.needs[2].then(|| to_t(dbeta)).transpose()?,
        ])
    }
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    /// Number of training batches folded in so far.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], momentum, updates: 0 }
    }
}

struct BatchNormOp {
    /// Per channel, as used in the forward pass.
    mean: Vec<f64>,
    rstd: Vec<f64>,
    train: bool,
}

impl<T: Element> Backward<T> for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let dims = x.dims5()?;
        let [n, c, ..] = dims;
        let s = spatial_len(&dims);
        let m = (n * s) as f64;
        let (xd, dy) = (x.data(), ctx.grad_out.data());
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); xd.len()]);
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ch in 0..c {
            let (mu, rstd, gm) = (self.mean[ch], self.rstd[ch], gamma[ch].as_f64());
            let idx = |ni: usize| (ni * c + ch) * s..(ni * c + ch + 1) * s;
            for ni in 0..n {
                for i in idx(ni) {
                    let d = dy[i].as_f64();
                    dgamma[ch] += d * (xd[i].as_f64() - mu) * rstd;
                    dbeta[ch] += d;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let (k1, k2) = if self.train { (dbeta[ch] / m, dgamma[ch] / m) } else { (0.0, 0.0) };
                for ni in 0..n {
                    for i in idx(ni) {
                        let xhat = (xd[i].as_f64() - mu) * rstd;
                        dx[i] = cast(gm * rstd * (dy[i].as_f64() - k1 - xhat * k2));
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(cast).collect());
        Ok(vec![
            dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
            ctx.needs[1].then(|| to_t(dgamma)).transpose()?,
            ctx.needs[2].then(|| to_t(dbeta)).transpose()?,
        ])
    }
}

fn normalize<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    channel_stats: impl Fn(usize, usize) -> (f64, f64),
) -> Result<Tensor<T>> {
    let dims = x.dims5()?;
    let [n, c, ..] = dims;
    let s = spatial_len(&dims);
    let mut out = Vec::with_capacity(x.numel());
    let xd = x.data();
    for ni in 0..n {
        for ch in 0..c {
            let (mu, rstd) = channel_stats(ni, ch);
            let (gm, bt) = (gamma[ch].as_f64(), beta[ch].as_f64());
            let base = (ni * c + ch) * s;
            out.extend(xd[base..base + s].iter().map(|&v| cast::<T>(gm * (v.as_f64() - mu) * rstd + bt)));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl<T: Element> Tape<T> {
    /// Normalize over `groups` groups of consecutive channels per sample.
    /// `groups == C` is instance normalization.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let dims = xt.dims5()?;
        let [n, c, ..] = dims;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("{c} channels cannot be split into {groups} groups")));
        }
        check_affine(self.value(gamma), self.value(beta), c)?;
        let s = spatial_len(&dims);
        let cg = c / groups;
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for g in 0..groups {
                let base = (ni * c + g * cg) * s;
                let vals = xt.data()[base..base + cg * s].iter().map(|v| v.as_f64());
                let (mu, var) = mean_var(vals, cg * s);
                mean.push(mu);
                rstd.push(1.0 / (var + eps).sqrt());
            }
        }
        let out = normalize(xt, self.value(gamma).data(), self.value(beta).data(), |ni, ch| {
            let k = ni * groups + ch / cg;
            (mean[k], rstd[k])
        })?;
        self.push_op(out, &[x, gamma, beta], GroupNormOp { groups, mean, rstd })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).dims5()?[1];
        self.group_norm(x, c, gamma, beta, eps)
    }

    /// Per-channel normalization over the batch. Train mode uses batch
    /// statistics and folds them into `running`; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: Mode,
        running: &mut RunningStats,
    ) -> Result<Var> {
        let xt = self.value(x);
        let dims = xt.dims5()?;
        let [n, c, ..] = dims;
        check_affine(self.value(gamma), self.value(beta), c)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(shape_err!("running statistics for {} channels, input has {c}", running.mean.len()));
        }
        let s = spatial_len(&dims);
        let (mean, rstd, train) = match mode {
            Mode::Train => {
                let mut mean = Vec::with_capacity(c);
                let mut rstd = Vec::with_capacity(c);
                let count = n * s;
                for ch in 0..c {
                    let vals = (0..n)
                        .flat_map(|ni| xt.data()[(ni * c + ch) * s..(ni * c + ch + 1) * s].iter())
                        .map(|v| v.as_f64());
                    let (mu, var) = mean_var(vals, count);
                    let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                    let mom = running.momentum;
                    running.mean[ch] = (1.0 - mom) * running.mean[ch] + mom * mu;
                    running.var[ch] = (1.0 - mom) * running.var[ch] + mom * unbiased;
                    mean.push(mu);
                    rstd.push(1.0 / (var + eps).sqrt());
                }
                running.updates += 1;
                (mean, rstd, true)
            }
            Mode::Eval => {
                if running.updates == 0 {
                    return Err(Error::State("batch norm evaluated before any statistics were accumulated".into()));
                }
                let rstd = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (running.mean.clone(), rstd, false)
            }
        };
        let out = normalize(xt, self.value(gamma).data(), self.value(beta).data(), |_, ch| (mean[ch], rstd[ch]))?;
        self.push_op(out, &[x, gamma, beta], BatchNormOp { mean, rstd, train })
    }
}
