//! Volumes, cases, label encoding, preprocessing and augmentation.
//!
//! Voxel data is stored channel-major as `[C][D][H][W]` with `W` fastest.

mod dataset;
mod native;
pub mod nifti;
mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub use dataset::{dataset_ids, load_brats_case, load_case, load_dataset, write_native_dataset, DatasetFormat, DatasetIndex, INDEX_FILE};
pub use native::{read_native, read_native_case, write_native, write_native_case};
pub use nifti::{read_nifti, write_nifti, NiftiDType};
pub use synth::{synth_case, SynthSpec};

/// Modality order of the image channels.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];
/// Raw label values.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];
/// Target channel names, in channel order.
pub const REGIONS: [&str; 3] = ["WT", "TC", "ET"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Image,
    LabelMap,
    ChannelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub extents: [usize; 3],
    /// Millimetres per voxel along D, H, W.
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    pub kind: VolumeKind,
}

impl Volume {
    pub fn new(channels: usize, extents: [usize; 3], spacing: [f64; 3], data: Vec<f32>, kind: VolumeKind) -> Result<Self> {
        let v = Volume { channels, extents, spacing, data, kind };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(channels: usize, extents: [usize; 3], spacing: [f64; 3], kind: VolumeKind) -> Self {
        let n = channels * extents.iter().product::<usize>();
        Volume { channels, extents, spacing, data: vec![0.0; n], kind }
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.extents[1] + h) * self.extents[2] + w
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Argument("volume must have at least one channel".into()));
        }
        if self.data.len() != self.channels * self.voxels() {
            return Err(shape_err!(
                "{} values for {} channels of {:?}",
                self.data.len(),
                self.channels,
                self.extents
            ));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        match self.kind {
            VolumeKind::LabelMap => {
                if let Some(v) = self.data.iter().find(|&&v| !LABELS.iter().any(|&l| l as f32 == v)) {
                    return Err(Error::Argument(format!("label value {v} not in {LABELS:?}")));
                }
            }
            VolumeKind::ChannelMask => {
                if let Some(v) = self.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Argument(format!("mask value {v} is not 0 or 1")));
                }
            }
            VolumeKind::Image => {
                if self.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("image voxels".into()));
                }
            }
        }
        Ok(())
    }

    /// `[C, D, H, W]` tensor over the same data.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.extents;
        Tensor::new(vec![self.channels, d, h, w], self.data.clone()).expect("validated volume")
    }

    /// Copy the box `[origin, origin + size)`; positions outside the volume
    /// (negative or past the end) read as zero.
    pub fn window(&self, origin: [isize; 3], size: [usize; 3]) -> Volume {
        let mut out = Volume::zeros(self.channels, size, self.spacing, self.kind);
        for c in 0..self.channels {
            let src = self.channel(c);
            let n_out = out.voxels();
            let dst = &mut out.data[c * n_out..(c + 1) * n_out];
            for d in 0..size[0] {
                let sd = origin[0] + d as isize;
                if sd < 0 || sd >= self.extents[0] as isize {
                    continue;
                }
                for h in 0..size[1] {
                    let sh = origin[1] + h as isize;
                    if sh < 0 || sh >= self.extents[1] as isize {
                        continue;
                    }
                    let w0 = (-origin[2]).max(0) as usize;
                    let w1 = ((self.extents[2] as isize - origin[2]).max(0) as usize).min(size[2]);
                    if w0 >= w1 {
                        continue;
                    }
                    let s = (sd as usize * self.extents[1] + sh as usize) * self.extents[2];
                    let sw = (origin[2] + w0 as isize) as usize;
                    let o = (d * size[1] + h) * size[2];
                    dst[o + w0..o + w1].copy_from_slice(&src[s + sw..s + sw + (w1 - w0)]);
                }
            }
        }
        out
    }

    /// Reverse the order of voxels along `axis` (0 = D, 1 = H, 2 = W).
    pub fn flip(&mut self, axis: usize) {
        let [d, h, w] = self.extents;
        let n = self.voxels();
        for c in 0..self.channels {
            let ch = &mut self.data[c * n..(c + 1) * n];
            match axis {
                0 => {
                    for i in 0..d / 2 {
                        let (a, b) = ch.split_at_mut((d - 1 - i) * h * w);
                        a[i * h * w..(i + 1) * h * w].swap_with_slice(&mut b[..h * w]);
                    }
                }
                1 => {
                    for plane in ch.chunks_mut(h * w) {
                        for i in 0..h / 2 {
                            let (a, b) = plane.split_at_mut((h - 1 - i) * w);
                            a[i * w..(i + 1) * w].swap_with_slice(&mut b[..w]);
                        }
                    }
                }
                _ => ch.chunks_mut(w).for_each(|row| row.reverse()),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    /// Four channels in [`MODALITIES`] order.
    pub image: Volume,
    pub label: Option<Volume>,
}

impl Case {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        if let Some(label) = &self.label {
            label.validate()?;
            if label.extents != self.image.extents || label.spacing != self.image.spacing {
                return Err(shape_err!(
                    "case {}: label {:?} @ {:?} vs image {:?} @ {:?}",
                    self.id,
                    label.extents,
                    label.spacing,
                    self.image.extents,
                    self.image.spacing
                ));
            }
        }
        Ok(())
    }
}

/// Standardize each channel over its nonzero voxels; zero voxels stay zero.
pub fn normalize_nonzero(volume: &Volume) -> Result<Volume> {
    let mut out = volume.clone();
    for c in 0..volume.channels {
        let ch = out.channel_mut(c);
        let (n, sum) = ch.iter().filter(|&&v| v != 0.0).fold((0usize, 0.0f64), |(n, s), &v| (n + 1, s + v as f64));
        if n < 2 {
            return Err(Error::Argument(format!("channel {c} has {n} nonzero voxels, need at least 2")));
        }
        let mean = sum / n as f64;
        let var = ch.iter().filter(|&&v| v != 0.0).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Argument(format!("channel {c} is constant over its nonzero voxels")));
        }
        for v in ch.iter_mut().filter(|v| **v != 0.0) {
            let z = ((*v as f64 - mean) / std) as f32;
            // Keep the zero set intact even if a voxel lands exactly on the mean.
            *v = if z == 0.0 { f32::MIN_POSITIVE } else { z };
        }
    }
    Ok(out)
}

/// Raw labels to nested `(WT, TC, ET)` masks.
pub fn labels_to_channels(label: &Volume) -> Result<Volume> {
    if label.channels != 1 {
        return Err(shape_err!("label map must have one channel, got {}", label.channels));
    }
    let n = label.voxels();
    let mut data = vec![0.0f32; 3 * n];
    for (i, &v) in label.data.iter().enumerate() {
        let (wt, tc, et) = match v as i32 {
            _ if v.fract() != 0.0 => return Err(Error::Argument(format!("label value {v} not in {LABELS:?}"))),
            0 => (0.0, 0.0, 0.0),
            1 => (1.0, 1.0, 0.0),
            2 => (1.0, 0.0, 0.0),
            4 => (1.0, 1.0, 1.0),
            _ => return Err(Error::Argument(format!("label value {v} not in {LABELS:?}"))),
        };
        data[i] = wt;
        data[n + i] = tc;
        data[2 * n + i] = et;
    }
    Volume::new(3, label.extents, label.spacing, data, VolumeKind::ChannelMask)
}

/// `[3, D, H, W]` probabilities to a label map: 4 where ET is on, else 1
/// where TC is on, else 2 where WT is on, else 0.
pub fn channels_to_labels(probs: &Tensor<f32>, spacing: [f64; 3], threshold: f32) -> Result<Volume> {
    let s = probs.shape();
    if s.len() != 4 || s[0] != 3 {
        return Err(shape_err!("expected [3, D, H, W] probabilities, got {s:?}"));
    }
    let n = s[1] * s[2] * s[3];
    let p = probs.data();
    let data = (0..n)
        .map(|i| {
            if p[2 * n + i] > threshold {
                4.0
            } else if p[n + i] > threshold {
                1.0
            } else if p[i] > threshold {
                2.0
            } else {
                0.0
            }
        })
        .collect();
    Volume::new(1, [s[1], s[2], s[3]], spacing, data, VolumeKind::LabelMap)
}

/// Offset of a window of `size` placed `pad` voxels before the volume start
/// when the volume is smaller than the crop.
fn crop_origin<R: Rng + ?Sized>(extent: usize, size: usize, rng: &mut R) -> isize {
    if extent >= size {
        rng.random_range(0..=extent - size) as isize
    } else {
        -(((size - extent) / 2) as isize)
    }
}

/// The same uniformly placed window of both image and label. Axes shorter
/// than the crop are zero-padded symmetrically first.
pub fn random_crop<R: Rng + ?Sized>(case: &Case, crop: [usize; 3], rng: &mut R) -> Case {
    let e = case.image.extents;
    let origin = [crop_origin(e[0], crop[0], rng), crop_origin(e[1], crop[1], rng), crop_origin(e[2], crop[2], rng)];
    Case {
        id: case.id.clone(),
        image: case.image.window(origin, crop),
        label: case.label.as_ref().map(|l| l.window(origin, crop)),
    }
}

/// Per-channel intensity scale and shift and per-axis mirror flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: Vec<f64>,
    /// Absolute shift, already multiplied by the channel's nonzero std.
    pub shift: Vec<f64>,
    pub flip: [bool; 3],
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        AugmentParams { scale: vec![1.0; channels], shift: vec![0.0; channels], flip: [false; 3] }
    }

    /// `s ~ U(0.9, 1.1)`, `t ~ U(-0.1, 0.1) * std`, each flip with p = 0.5.
    pub fn sample<R: Rng + ?Sized>(image: &Volume, rng: &mut R) -> Self {
        let mut scale = Vec::with_capacity(image.channels);
        let mut shift = Vec::with_capacity(image.channels);
        for c in 0..image.channels {
            scale.push(rng.random_range(0.9..=1.1));
            shift.push(rng.random_range(-0.1..=0.1) * nonzero_std(image.channel(c)));
        }
        let flip = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        AugmentParams { scale, shift, flip }
    }
}

fn nonzero_std(ch: &[f32]) -> f64 {
    let (n, sum) = ch.iter().filter(|&&v| v != 0.0).fold((0usize, 0.0f64), |(n, s), &v| (n + 1, s + v as f64));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (ch.iter().filter(|&&v| v != 0.0).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// `x * s_c + t_c` on every voxel of channel `c`, then the flips on image and
/// label together.
pub fn apply_augment(case: &Case, params: &AugmentParams) -> Result<Case> {
    if params.scale.len() != case.image.channels || params.shift.len() != case.image.channels {
        return Err(shape_err!("augment parameters for {} channels, image has {}", params.scale.len(), case.image.channels));
    }
    let mut out = case.clone();
    for c in 0..out.image.channels {
        let (s, t) = (params.scale[c], params.shift[c]);
        if s == 1.0 && t == 0.0 {
            continue;
        }
        for v in out.image.channel_mut(c) {
            *v = (*v as f64 * s + t) as f32;
        }
    }
    for axis in 0..3 {
        if params.flip[axis] {
            out.image.flip(axis);
            if let Some(l) = out.label.as_mut() {
                l.flip(axis);
            }
        }
    }
    Ok(out)
}

pub fn augment<R: Rng + ?Sized>(case: &Case, rng: &mut R) -> Result<Case> {
    let params = AugmentParams::sample(&case.image, rng);
    apply_augment(case, &params)
}
