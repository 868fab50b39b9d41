//! Synthetic four-channel cases with nested ellipsoidal tumour regions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Case, Volume, VolumeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// 0 = clean, 1 = noisy with a strong bias field.
    pub difficulty: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { extents: [48, 48, 48], spacing: [1.0; 3], difficulty: 0.5 }
    }
}

/// Additive intensity per channel (T1, T1c, T2, FLAIR) for edema, the
/// non-enhancing core and the enhancing region.
const EDEMA: [f32; 4] = [-0.2, 0.0, 0.6, 0.8];
const CORE: [f32; 4] = [-0.4, -0.2, 0.4, 0.3];
const ENHANCING: [f32; 4] = [-0.1, 0.9, 0.2, 0.4];
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// A random ellipsoid with radii `fraction` of `self`'s, shifted so it
    /// stays mostly inside `self`.
    fn nested<R: Rng + ?Sized>(&self, rng: &mut R) -> Ellipsoid {
        let mut radii = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            radii[a] = self.radii[a] * rng.random_range(0.6..0.8);
            center[a] = self.center[a] + (self.radii[a] - radii[a]) * rng.random_range(-0.5..0.5);
        }
        Ellipsoid { center, radii }
    }
}

struct Labels {
    data: Vec<f32>,
    counts: [usize; 3],
    brain: Vec<bool>,
}

fn draw_labels<R: Rng + ?Sized>(e: [usize; 3], rng: &mut R) -> Labels {
    let ef = e.map(|v| v as f64);
    let brain = Ellipsoid {
        center: std::array::from_fn(|a| ef[a] / 2.0 - 0.5 + rng.random_range(-0.03..0.03) * ef[a]),
        radii: std::array::from_fn(|a| 0.45 * ef[a] * rng.random_range(0.92..1.0)),
    };
    let wt = Ellipsoid {
        center: std::array::from_fn(|a| brain.center[a] + rng.random_range(-0.1..0.1) * ef[a]),
        radii: std::array::from_fn(|a| ef[a] * rng.random_range(0.2..0.3)),
    };
    let tc = wt.nested(rng);
    let et = tc.nested(rng);
    let n = e.iter().product();
    let mut data = vec![0.0f32; n];
    let mut in_brain = vec![false; n];
    let mut counts = [0usize; 3];
    for d in 0..e[0] {
        for h in 0..e[1] {
            for w in 0..e[2] {
                let i = (d * e[1] + h) * e[2] + w;
                let p = [d as f64, h as f64, w as f64];
                if !brain.contains(p) {
                    continue;
                }
                in_brain[i] = true;
                let in_wt = wt.contains(p);
                let in_tc = in_wt && tc.contains(p);
                let in_et = in_tc && et.contains(p);
                data[i] = if in_et {
                    4.0
                } else if in_tc {
                    1.0
                } else if in_wt {
                    2.0
                } else {
                    0.0
                };
                counts[0] += in_wt as usize;
                counts[1] += in_tc as usize;
                counts[2] += in_et as usize;
            }
        }
    }
    Labels { data, counts, brain: in_brain }
}

/// Smooth multiplicative field `1 + amp * mean of three axis cosines`.
fn bias_field<R: Rng + ?Sized>(e: [usize; 3], amp: f64, rng: &mut R) -> Vec<f32> {
    let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.5));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let axis = |a: usize| -> Vec<f64> {
        (0..e[a])
            .map(|i| (std::f64::consts::TAU * freq[a] * i as f64 / e[a] as f64 + phase[a]).cos())
            .collect()
    };
    let (cd, ch, cw) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(e.iter().product());
    for &a in &cd {
        for &b in &ch {
            for &c in &cw {
                out.push((1.0 + amp * (a + b + c) / 3.0) as f32);
            }
        }
    }
    out
}

/// Label 4 inside label 1 inside label 2, all within a brain ellipsoid.
/// Voxels outside the brain are exactly zero in every channel.
pub fn synth_case<R: Rng + ?Sized>(id: &str, spec: &SynthSpec, rng: &mut R) -> Result<Case> {
    let e = spec.extents;
    if e.iter().any(|&v| v < 16) {
        return Err(Error::Argument(format!("synthetic extents must be >= 16 per axis, got {e:?}")));
    }
    if !(0.0..=1.0).contains(&spec.difficulty) {
        return Err(Error::Argument(format!("difficulty {} outside [0, 1]", spec.difficulty)));
    }
    let n: usize = e.iter().product();
    let labels = (0..MAX_ATTEMPTS)
        .map(|_| draw_labels(e, rng))
        .find(|l| {
            let wt_frac = l.counts[0] as f64 / n as f64;
            l.counts[2] >= 8 && l.counts[1] > l.counts[2] && wt_frac > 0.005 && wt_frac < 0.2
        })
        .ok_or_else(|| Error::State(format!("no valid tumour layout after {MAX_ATTEMPTS} attempts")))?;

    let noise = Normal::new(0.0, 0.1 + 0.1 * spec.difficulty).expect("positive std");
    let mut image = vec![0.0f32; 4 * n];
    for c in 0..4 {
        let field = bias_field(e, 0.1 * spec.difficulty, rng);
        let base = rng.random_range(0.9..1.1f32);
        let ch = &mut image[c * n..(c + 1) * n];
        for i in 0..n {
            if !labels.brain[i] {
                continue;
            }
            let offset = match labels.data[i] as u8 {
                2 => EDEMA[c],
                1 => CORE[c],
                4 => ENHANCING[c],
                _ => 0.0,
            };
            let v = (base + offset) * field[i] + noise.sample(rng) as f32;
            ch[i] = v.max(1e-3);
        }
    }
    let case = Case {
        id: id.to_string(),
        image: Volume::new(4, e, spec.spacing, image, VolumeKind::Image)?,
        label: Some(Volume::new(1, e, spec.spacing, labels.data, VolumeKind::LabelMap)?),
    };
    Ok(case)
}
