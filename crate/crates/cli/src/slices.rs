//! `volseg export-slices`: a T1c slice with the label regions overlaid, as
//! a binary PPM.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use volseg::data::{Case, Volume};
use volseg::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Fixed third array axis; the image spans the first two.
    Axial,
    /// Fixed first array axis.
    Sagittal,
    /// Fixed second array axis.
    Coronal,
}

impl Axis {
    pub fn fixed(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Coronal => 1,
            Axis::Axial => 2,
        }
    }
}

/// Fill colour per raw label; the innermost region wins.
pub fn label_color(label: f32) -> Option<[u8; 3]> {
    match label as u8 {
        2 => Some([0, 200, 0]),
        1 => Some([220, 0, 0]),
        4 => Some([255, 220, 0]),
        _ => None,
    }
}

pub const T1C: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Rows follow the lower remaining array axis, columns the higher one.
pub fn render(image: &Volume, channel: usize, label: &Volume, axis: Axis, index: usize) -> Result<Rgb> {
    if label.extents != image.extents || label.channels != 1 {
        return Err(Error::Shape(format!("label {:?} does not match image {:?}", label.extents, image.extents)));
    }
    if channel >= image.channels {
        return Err(Error::Argument(format!("image has {} channels, need channel {channel}", image.channels)));
    }
    let fixed = axis.fixed();
    let e = image.extents;
    if index >= e[fixed] {
        return Err(Error::Argument(format!("slice index {index} out of range 0..{} for {axis:?}", e[fixed])));
    }
    let (ra, ca) = match fixed {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let at = |r: usize, c: usize| {
        let mut p = [0; 3];
        p[fixed] = index;
        p[ra] = r;
        p[ca] = c;
        image.index(p[0], p[1], p[2])
    };
    let ch = image.channel(channel);
    let (height, width) = (e[ra], e[ca]);
    let vals: Vec<f32> = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| ch[at(r, c)]).collect();
    let (lo, hi) = vals.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = Vec::with_capacity(vals.len());
    for r in 0..height {
        for c in 0..width {
            let i = at(r, c);
            let px = label_color(label.data[i]).unwrap_or_else(|| {
                let g = (((ch[i] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
                [g, g, g]
            });
            pixels.push(px);
        }
    }
    Ok(Rgb { width, height, pixels })
}

pub fn cmd_export_slices(case: &Case, label: &Volume, axis: Axis, index: usize, out: &Path) -> Result<Rgb> {
    let img = render(&case.image, T1C, label, axis, index)?;
    fs::write(out, img.to_ppm())?;
    log::info!("event=export case={} axis={axis:?} index={index} size={}x{} out={}", case.id, img.width, img.height, out.display());
    Ok(img)
}
