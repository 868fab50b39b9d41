//! Hybrid segmentation loss: soft dice + focal + active contour
//! (region volume term and boundary length term).
//!
//! All terms take sigmoid probabilities `[N, C, D, H, W]` and a binary target
//! of the same shape, and are differentiable w.r.t. the prediction only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, BackwardCtx, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{cast, Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Raw voxel sums for the active-contour terms.
    #[default]
    Sum,
    /// Active-contour terms divided by the number of target elements.
    MeanPerVoxel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub dice: f64,
    pub focal: f64,
    pub acl: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights { dice: 1.0, focal: 1.0, acl: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub eps_dice: f64,
    pub eps_focal: f64,
    pub eps_length: f64,
    pub gamma: f64,
    /// Foreground energy of the volume term.
    pub c1: f64,
    /// Background energy of the volume term.
    pub c2: f64,
    pub weights: TermWeights,
    pub reduction: Reduction,
    /// Add the background half `-(1 - t) p^gamma log(1 - p + eps)` to the focal term.
    pub symmetric_focal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps_dice: 1e-5,
            eps_focal: 1e-8,
            eps_length: 1e-8,
            gamma: 2.0,
            c1: 1.0,
            c2: 0.0,
            weights: TermWeights::default(),
            reduction: Reduction::Sum,
            symmetric_focal: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for (name, v) in [("eps_dice", self.eps_dice), ("eps_focal", self.eps_focal), ("eps_length", self.eps_length)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.c1 == self.c2 {
            return Err(Error::Config("c1 and c2 must differ".into()));
        }
        Ok(())
    }
}

/// Per-term values of one hybrid loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Sum of the per-channel dice losses.
    pub dice: f64,
    pub dice_per_channel: Vec<f64>,
    pub focal: f64,
    /// Volume and length terms as combined into `total` (after reduction).
    pub acl_volume: f64,
    pub acl_length: f64,
    pub acl_volume_raw: f64,
    pub acl_length_raw: f64,
}

pub struct HybridLoss {
    pub total: Var,
    pub report: LossReport,
}

fn check_pair<T: Element>(tape: &Tape<T>, pred: Var, truth: Var) -> Result<[usize; 5]> {
    let (p, t) = (tape.value(pred), tape.value(truth));
    if p.shape() != t.shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", p.shape(), t.shape()));
    }
    p.dims5()
}

fn scalar<T: Element>(v: f64) -> Tensor<T> {
    Tensor::scalar(cast(v))
}

/// `b^e`, with `0^e = 0` for `e != 0` (so `e < 0` yields the zero subgradient).
fn pow0(b: f64, e: f64) -> f64 {
    if b == 0.0 {
        if e == 0.0 { 1.0 } else { 0.0 }
    } else {
        b.powf(e)
    }
}

/// Per-channel `(intersection, denominator)` over batch and voxels.
fn dice_parts<T: Element>(p: &[T], t: &[T], dims: [usize; 5], eps: f64) -> Vec<(f64, f64)> {
    let [n, c, ..] = dims;
    let s = dims[2] * dims[3] * dims[4];
    (0..c)
        .map(|ch| {
            let (mut inter, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for ni in 0..n {
                let r = (ni * c + ch) * s..(ni * c + ch + 1) * s;
                for (&pv, &tv) in p[r.clone()].iter().zip(&t[r]) {
                    let (pv, tv) = (pv.as_f64(), tv.as_f64());
                    inter += pv * tv;
                    pp += pv * pv;
                    tt += tv * tv;
                }
            }
            (inter, tt + pp + eps)
        })
        .collect()
}

pub fn dice_loss_per_channel<T: Element>(pred: &Tensor<T>, truth: &Tensor<T>, eps: f64) -> Result<Vec<f64>> {
    pred.expect_same_shape(truth)?;
    let dims = pred.dims5()?;
    Ok(dice_parts(pred.data(), truth.data(), dims, eps).into_iter().map(|(i, d)| 1.0 - 2.0 * i / d).collect())
}

struct SoftDiceOp {
    dims: [usize; 5],
    parts: Vec<(f64, f64)>,
}

impl<T: Element> Backward<T> for SoftDiceOp {
    fn name(&self) -> &'static str {
        "soft_dice_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad_out.item()?.as_f64();
        let (p, t) = (ctx.inputs[0], ctx.inputs[1]);
        let [_, c, ..] = self.dims;
        let s = self.dims[2] * self.dims[3] * self.dims[4];
        let mut out = Vec::with_capacity(p.numel());
        for (i, (&pv, &tv)) in p.data().iter().zip(t.data()).enumerate() {
            let (inter, den) = self.parts[(i / s) % c];
            let (pv, tv) = (pv.as_f64(), tv.as_f64());
            out.push(cast::<T>(g * (-2.0 * tv / den + 4.0 * inter * pv / (den * den))));
        }
        Ok(vec![Some(Tensor::new(p.shape().to_vec(), out)?), None])
    }
}

struct FocalOp {
    gamma: f64,
    eps: f64,
    symmetric: bool,
}

impl FocalOp {
    fn value(&self, p: f64, t: f64) -> f64 {
        let mut v = pow0(1.0 - p, self.gamma) * t * (p + self.eps).max(self.eps).ln();
        if self.symmetric {
            v += pow0(p, self.gamma) * (1.0 - t) * (1.0 - p + self.eps).max(self.eps).ln();
        }
        -v
    }

    fn deriv(&self, p: f64, t: f64) -> f64 {
        let q = 1.0 - p;
        let mut d = t
            * (-self.gamma * pow0(q, self.gamma - 1.0) * (p + self.eps).max(self.eps).ln()
                + pow0(q, self.gamma) / (p + self.eps));
        if self.symmetric {
            d += (1.0 - t)
                * (self.gamma * pow0(p, self.gamma - 1.0) * (q + self.eps).max(self.eps).ln()
                    - pow0(p, self.gamma) / (q + self.eps));
        }
        -d
    }
}

impl<T: Element> Backward<T> for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (p, t) = (ctx.inputs[0], ctx.inputs[1]);
        let k = ctx.grad_out.item()?.as_f64() / p.numel() as f64;
        let g = p.zip_map(t, |pv, tv| cast(k * self.deriv(pv.as_f64(), tv.as_f64())))?;
        Ok(vec![Some(g), None])
    }
}

struct AclVolumeOp {
    c1: f64,
    c2: f64,
    scale: f64,
    sign_fg: f64,
    sign_bg: f64,
}

impl<T: Element> Backward<T> for AclVolumeOp {
    fn name(&self) -> &'static str {
        "acl_volume"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let k = ctx.grad_out.item()?.as_f64() * self.scale;
        let g = ctx.inputs[0].zip_map(ctx.inputs[1], |_, tv| {
            let tv = tv.as_f64();
            cast(k * (self.sign_fg * (self.c1 - tv).powi(2) - self.sign_bg * (self.c2 - tv).powi(2)))
        })?;
        Ok(vec![Some(g), None])
    }
}

/// Forward differences along D, H, W; zero at the trailing face of each axis.
#[inline]
fn forward_diffs<T: Element>(p: &[T], base: usize, dims: [usize; 5], z: usize, y: usize, x: usize) -> [f64; 3] {
    let [_, _, d, h, w] = dims;
    let i = base + (z * h + y) * w + x;
    let v = p[i].as_f64();
    [
        if z + 1 < d { p[i + h * w].as_f64() - v } else { 0.0 },
        if y + 1 < h { p[i + w].as_f64() - v } else { 0.0 },
        if x + 1 < w { p[i + 1].as_f64() - v } else { 0.0 },
    ]
}

fn length_sum<T: Element>(p: &[T], dims: [usize; 5], eps: f64) -> f64 {
    let [n, c, d, h, w] = dims;
    let mut total = 0.0;
    for vol in 0..n * c {
        let base = vol * d * h * w;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let [a, b, e] = forward_diffs(p, base, dims, z, y, x);
                    total += ((a * a + b * b + e * e).abs() + eps).sqrt();
                }
            }
        }
    }
    total
}

struct AclLengthOp {
    dims: [usize; 5],
    eps: f64,
    scale: f64,
}

impl<T: Element> Backward<T> for AclLengthOp {
    fn name(&self) -> &'static str {
        "acl_length"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let k = ctx.grad_out.item()?.as_f64() * self.scale;
        let p = ctx.inputs[0].data();
        let [n, c, d, h, w] = self.dims;
        let mut g = vec![0.0f64; p.len()];
        for vol in 0..n * c {
            let base = vol * d * h * w;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let diffs = forward_diffs(p, base, self.dims, z, y, x);
                        let [a, b, e] = diffs;
                        let r = ((a * a + b * b + e * e).abs() + self.eps).sqrt();
                        if r == 0.0 {
                            continue;
                        }
                        let i = base + (z * h + y) * w + x;
                        g[i] -= k * (a + b + e) / r;
                        if z + 1 < d {
                            g[i + h * w] += k * a / r;
                        }
                        if y + 1 < h {
                            g[i + w] += k * b / r;
                        }
                        if x + 1 < w {
                            g[i + 1] += k * e / r;
                        }
                    }
                }
            }
        }
        let g = Tensor::new(ctx.inputs[0].shape().to_vec(), g.into_iter().map(cast).collect())?;
        Ok(vec![Some(g)])
    }
}

fn reduction_scale(cfg: &LossConfig, numel: usize) -> f64 {
    match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::MeanPerVoxel => 1.0 / numel as f64,
    }
}

/// Raw `(fg, bg)` sums of the volume term.
fn volume_parts<T: Element>(p: &[T], t: &[T], c1: f64, c2: f64) -> (f64, f64) {
    let (mut fg, mut bg) = (0.0, 0.0);
    for (&pv, &tv) in p.iter().zip(t) {
        let (pv, tv) = (pv.as_f64(), tv.as_f64());
        fg += pv * (c1 - tv).powi(2);
        bg += (1.0 - pv) * (c2 - tv).powi(2);
    }
    (fg, bg)
}

impl<T: Element> Tape<T> {
    /// Sum over channels of `1 - 2 sum(t p) / (sum t^2 + sum p^2 + eps)`,
    /// each channel pooled over the batch.
    pub fn soft_dice_loss(&mut self, pred: Var, truth: Var, eps: f64) -> Result<Var> {
        let dims = check_pair(self, pred, truth)?;
        let parts = dice_parts(self.value(pred).data(), self.value(truth).data(), dims, eps);
        let loss: f64 = parts.iter().map(|(i, d)| 1.0 - 2.0 * i / d).sum();
        self.push_op(scalar(loss), &[pred, truth], SoftDiceOp { dims, parts })
    }

    /// `-(1/N) sum (1 - p)^gamma t log(p + eps)` over all `N` elements.
    pub fn focal_loss(&mut self, pred: Var, truth: Var, gamma: f64, eps: f64, symmetric: bool) -> Result<Var> {
        check_pair(self, pred, truth)?;
        let op = FocalOp { gamma, eps, symmetric };
        let (p, t) = (self.value(pred), self.value(truth));
        let total: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| op.value(a.as_f64(), b.as_f64())).sum();
        self.push_op(scalar(total / p.numel() as f64), &[pred, truth], op)
    }

    /// `|sum p (c1 - t)^2| + |sum (1 - p)(c2 - t)^2|`, times `scale`.
    pub fn acl_volume(&mut self, pred: Var, truth: Var, c1: f64, c2: f64, scale: f64) -> Result<Var> {
        check_pair(self, pred, truth)?;
        let (fg, bg) = volume_parts(self.value(pred).data(), self.value(truth).data(), c1, c2);
        let sign = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
        let op = AclVolumeOp { c1, c2, scale, sign_fg: sign(fg), sign_bg: sign(bg) };
        self.push_op(scalar(scale * (fg.abs() + bg.abs())), &[pred, truth], op)
    }

    /// `sum sqrt(|grad p|^2 + eps)` per channel volume, times `scale`.
    pub fn acl_length(&mut self, pred: Var, eps: f64, scale: f64) -> Result<Var> {
        let dims = self.value(pred).dims5()?;
        let total = length_sum(self.value(pred).data(), dims, eps);
        self.push_op(scalar(scale * total), &[pred], AclLengthOp { dims, eps, scale })
    }

    /// `(volume, length)` terms of the active-contour loss under `cfg`'s reduction.
    pub fn active_contour_loss(&mut self, pred: Var, truth: Var, cfg: &LossConfig) -> Result<(Var, Var)> {
        let scale = reduction_scale(cfg, self.value(pred).numel());
        let vol = self.acl_volume(pred, truth, cfg.c1, cfg.c2, scale)?;
        let len = self.acl_length(pred, cfg.eps_length, scale)?;
        Ok((vol, len))
    }
}

/// `w_dice * dice + w_focal * focal + w_acl * (volume + length)`.
pub fn hybrid_loss<T: Element>(tape: &mut Tape<T>, pred: Var, truth: Var, cfg: &LossConfig) -> Result<HybridLoss> {
    cfg.validate()?;
    let dice = tape.soft_dice_loss(pred, truth, cfg.eps_dice)?;
    let focal = tape.focal_loss(pred, truth, cfg.gamma, cfg.eps_focal, cfg.symmetric_focal)?;
    let (vol, len) = tape.active_contour_loss(pred, truth, cfg)?;
    let w = cfg.weights;
    let total = tape.weighted_sum(&[(dice, w.dice), (focal, w.focal), (vol, w.acl), (len, w.acl)])?;

    let item = |v: Var| tape.value(v).data()[0].as_f64();
    let scale = reduction_scale(cfg, tape.value(pred).numel());
    let report = LossReport {
        total: item(total),
        dice: item(dice),
        dice_per_channel: dice_loss_per_channel(tape.value(pred), tape.value(truth), cfg.eps_dice)?,
        focal: item(focal),
        acl_volume: item(vol),
        acl_length: item(len),
        acl_volume_raw: item(vol) / scale,
        acl_length_raw: item(len) / scale,
    };
    Ok(HybridLoss { total, report })
}
