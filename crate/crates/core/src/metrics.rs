//! Overlap and surface-distance metrics for the three nested tumour regions.
//!
//! Boundary voxels are foreground voxels with at least one face neighbour in
//! the background; voxels outside the grid count as background. Surface
//! distances come from an exact separable Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::data::{labels_to_channels, Volume, REGIONS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(extents: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != extents.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask of {} voxels for extents {extents:?}", data.len())));
        }
        Ok(Mask { extents, data })
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(extents.iter().product());
        for d in 0..extents[0] {
            for h in 0..extents[1] {
                for w in 0..extents[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Mask { extents, data }
    }

    /// Channel `c` of a 0/1 channel-mask volume.
    pub fn from_channel(volume: &Volume, c: usize) -> Self {
        Mask { extents: volume.extents, data: volume.channel(c).iter().map(|&v| v > 0.5).collect() }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground voxels with a 6-connected background neighbour.
    pub fn boundary(&self) -> Mask {
        let [dd, hh, ww] = self.extents;
        let at = |d: usize, h: usize, w: usize| self.data[(d * hh + h) * ww + w];
        Mask::from_fn(self.extents, |d, h, w| {
            at(d, h, w)
                && (d == 0
                    || d + 1 == dd
                    || h == 0
                    || h + 1 == hh
                    || w == 0
                    || w + 1 == ww
                    || !at(d - 1, h, w)
                    || !at(d + 1, h, w)
                    || !at(d, h - 1, w)
                    || !at(d, h + 1, w)
                    || !at(d, h, w - 1)
                    || !at(d, h, w + 1))
        })
    }
}

fn same_extents(a: &Mask, b: &Mask) -> Result<()> {
    if a.extents != b.extents {
        return Err(Error::Shape(format!("mask extents {:?} vs {:?}", a.extents, b.extents)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<Confusion> {
    same_extents(pred, truth)?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2|P ∩ T| / (|P| + |T|)`; 1 when both are empty.
pub fn dice_metric(pred: &Mask, truth: &Mask) -> Result<f64> {
    let c = confusion(pred, truth)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { (2 * c.tp) as f64 / denom as f64 })
}

/// `(TP / (TP + FN), TN / (TN + FP))`. With no positives in `truth` the
/// sensitivity is 1 if `pred` is empty and 0 otherwise; with no negatives
/// the specificity is 1.
pub fn sensitivity_specificity(pred: &Mask, truth: &Mask) -> Result<(f64, f64)> {
    let c = confusion(pred, truth)?;
    let sens = if c.tp + c.fn_ == 0 {
        if c.fp == 0 { 1.0 } else { 0.0 }
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let spec = if c.tn + c.fp == 0 { 1.0 } else { c.tn as f64 / (c.tn + c.fp) as f64 };
    Ok((sens, spec))
}

/// Lower envelope of parabolas `(|q - p| s)^2 + f[p]`, evaluated at every q.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let w = s * s;
    let site = |p: usize| f[p] + w * (p * p) as f64;
    let eval = |p: usize, q: usize| {
        let t = p.abs_diff(q) as f64 * s;
        t * t + f[p]
    };
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                }
                Some(&p) => {
                    let x = (site(q) - site(p)) / (2.0 * w * (q - p) as f64);
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(x);
                }
            }
            break;
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        // Neighbouring parabolas guard against rounding in the breakpoints.
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(v.len() - 1);
        *o = (lo..=hi).map(|j| eval(v[j], q)).fold(f64::INFINITY, f64::min);
    }
}

/// Squared Euclidean distance in mm² from every voxel to the nearest
/// `feature` voxel; infinite when `feature` is empty. The per-axis terms are
/// accumulated as `d + (h + w)`.
pub fn squared_distance_transform(feature: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let e = feature.extents;
    let n = feature.data.len();
    let mut g: Vec<f64> = feature.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [e[1] * e[2], e[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in [2, 1, 0] {
        let len = e[axis];
        if len == 0 {
            return g;
        }
        let stride = strides[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..n {
            if (start / stride) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[start + i * stride];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (i, o) in out.iter().enumerate() {
                g[start + i * stride] = *o;
            }
        }
    }
    g
}

/// Directed boundary distances from `pred` to `truth` followed by those from
/// `truth` to `pred`, in mm. `None` when either mask is empty.
pub fn surface_distances(pred: &Mask, truth: &Mask, spacing: [f64; 3]) -> Result<Option<Vec<f64>>> {
    same_extents(pred, truth)?;
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Argument(format!("spacing must be positive, got {spacing:?}")));
    }
    if pred.is_empty() || truth.is_empty() {
        return Ok(None);
    }
    let (bp, bt) = (pred.boundary(), truth.boundary());
    let to_truth = squared_distance_transform(&bt, spacing);
    let to_pred = squared_distance_transform(&bp, spacing);
    let mut out = Vec::new();
    out.extend(bp.data.iter().zip(&to_truth).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()));
    out.extend(bt.data.iter().zip(&to_pred).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()));
    Ok(Some(out))
}

/// Linearly interpolated percentile of unsorted `values`, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

/// Percentile of the pooled directed boundary distances; 100 gives the
/// classic Hausdorff distance. `None` when either mask is empty.
pub fn hausdorff(pred: &Mask, truth: &Mask, spacing: [f64; 3], q: f64) -> Result<Option<f64>> {
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Argument(format!("percentile {q} outside [0, 100]")));
    }
    Ok(surface_distances(pred, truth, spacing)?.and_then(|d| percentile(&d, q)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptyFlags {
    pub pred_empty: bool,
    pub truth_empty: bool,
    /// `truth` covers every voxel.
    pub no_negatives: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    pub dice: f64,
    pub hausdorff_max_mm: Option<f64>,
    pub hausdorff95_mm: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub flags: EmptyFlags,
}

pub fn region_metrics(region: &str, pred: &Mask, truth: &Mask, spacing: [f64; 3]) -> Result<RegionMetrics> {
    let dice = dice_metric(pred, truth)?;
    let (sensitivity, specificity) = sensitivity_specificity(pred, truth)?;
    let dists = surface_distances(pred, truth, spacing)?;
    let hd = |q| dists.as_deref().and_then(|d| percentile(d, q));
    Ok(RegionMetrics {
        region: region.to_string(),
        dice,
        hausdorff_max_mm: hd(100.0),
        hausdorff95_mm: hd(95.0),
        sensitivity,
        specificity,
        flags: EmptyFlags {
            pred_empty: pred.is_empty(),
            truth_empty: truth.is_empty(),
            no_negatives: truth.data.iter().all(|&b| b),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// WT, TC, ET.
    pub regions: Vec<RegionMetrics>,
}

/// Metrics per region between two label maps.
pub fn evaluate_case(pred: &Volume, truth: &Volume) -> Result<EvalResult> {
    if pred.extents != truth.extents {
        return Err(Error::Shape(format!("label extents {:?} vs {:?}", pred.extents, truth.extents)));
    }
    if pred.spacing != truth.spacing {
        return Err(Error::Argument(format!("label spacing {:?} vs {:?}", pred.spacing, truth.spacing)));
    }
    let (p, t) = (labels_to_channels(pred)?, labels_to_channels(truth)?);
    let regions = REGIONS
        .iter()
        .enumerate()
        .map(|(c, name)| region_metrics(name, &Mask::from_channel(&p, c), &Mask::from_channel(&t, c), truth.spacing))
        .collect::<Result<_>>()?;
    Ok(EvalResult { regions })
}
