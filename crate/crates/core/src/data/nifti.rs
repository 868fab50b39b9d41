//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) for uint8, int16 and float32 data.
//!
//! Volume axes map to file axes as D = i (`dim[1]`), H = j, W = k, so a
//! 240x240x155 file becomes a volume with extents `[240, 240, 155]`. A fourth
//! file dimension holds channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

use super::{Volume, VolumeKind};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDType {
    U8,
    I16,
    F32,
}

impl NiftiDType {
    fn code(self) -> i16 {
        match self {
            NiftiDType::U8 => 2,
            NiftiDType::I16 => 4,
            NiftiDType::F32 => 16,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDType::U8),
            4 => Ok(NiftiDType::I16),
            16 => Ok(NiftiDType::F32),
            _ => Err(Error::Unsupported(format!("NIfTI datatype code {code}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            NiftiDType::U8 => 1,
            NiftiDType::I16 => 2,
            NiftiDType::F32 => 4,
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let file = BufReader::new(File::open(path)?);
    if is_gz(path) {
        GzDecoder::new(file)
            .read_to_end(&mut buf)
            .map_err(|e| Error::Format(format!("{}: gzip stream: {e}", path.display())))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut buf)?;
    }
    Ok(buf)
}

struct Fields<'a> {
    b: &'a [u8],
    le: bool,
}

impl Fields<'_> {
    fn i16(&self, at: usize) -> i16 {
        let v = [self.b[at], self.b[at + 1]];
        if self.le { i16::from_le_bytes(v) } else { i16::from_be_bytes(v) }
    }

    fn f32(&self, at: usize) -> f32 {
        let v = self.b[at..at + 4].try_into().unwrap();
        if self.le { f32::from_le_bytes(v) } else { f32::from_be_bytes(v) }
    }
}

/// Parse a NIfTI-1 byte buffer. `kind` is attached to the result and
/// validated.
pub fn parse_nifti(bytes: &[u8], kind: VolumeKind) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("truncated NIfTI header ({} bytes)", bytes.len())));
    }
    let le = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(Error::Format("sizeof_hdr is not 348".into())),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Format(format!("bad NIfTI magic {:?} (only single-file n+1 is supported)", &bytes[344..348])));
    }
    let f = Fields { b: bytes, le };
    let ndim = f.i16(40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::Unsupported(format!("NIfTI with {ndim} dimensions")));
    }
    let mut dims = [1usize; 4];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = f.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    let dtype = NiftiDType::from_code(f.i16(70))?;
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        if (i as i16) < ndim {
            let p = f.f32(80 + 4 * i).abs() as f64;
            *s = if p > 0.0 { p } else { 1.0 };
        }
    }
    let offset = f.f32(108);
    if !(offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {offset}")));
    }
    let offset = offset as usize;
    let (slope, inter) = (f.f32(112), f.f32(116));
    let [nx, ny, nz, channels] = dims;
    let voxels = nx * ny * nz;
    let need = offset + voxels * channels * dtype.size();
    if bytes.len() < need {
        return Err(Error::Format(format!("truncated NIfTI data: {} of {need} bytes", bytes.len())));
    }
    let raw = &bytes[offset..need];
    let value = |i: usize| -> f32 {
        let at = i * dtype.size();
        let v = match dtype {
            NiftiDType::U8 => raw[at] as f32,
            NiftiDType::I16 => {
                let b = [raw[at], raw[at + 1]];
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f32
            }
            NiftiDType::F32 => {
                let b = raw[at..at + 4].try_into().unwrap();
                if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
            }
        };
        if slope != 0.0 && !(slope == 1.0 && inter == 0.0) { v * slope + inter } else { v }
    };
    // File order is i fastest; volume order is W (= k) fastest.
    let mut data = vec![0.0f32; voxels * channels];
    for c in 0..channels {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let src = ((c * nz + k) * ny + j) * nx + i;
                    data[c * voxels + (i * ny + j) * nz + k] = value(src);
                }
            }
        }
    }
    Volume::new(channels, [nx, ny, nz], spacing, data, kind)
}

pub fn read_nifti(path: &Path, kind: VolumeKind) -> Result<Volume> {
    parse_nifti(&read_all(path)?, kind).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn encode_nifti(volume: &Volume, dtype: NiftiDType) -> Result<Vec<u8>> {
    volume.validate()?;
    let [nx, ny, nz] = volume.extents;
    if volume.extents.iter().chain(std::iter::once(&volume.channels)).any(|&d| d > i16::MAX as usize) {
        return Err(Error::Unsupported(format!("extents {:?} exceed NIfTI-1 limits", volume.extents)));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let ndim: i16 = if volume.channels > 1 { 4 } else { 3 };
    let dims = [ndim, nx as i16, ny as i16, nz as i16, volume.channels as i16, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&dtype.code().to_le_bytes());
    h[72..74].copy_from_slice(&(8 * dtype.size() as i16).to_le_bytes());
    let pixdim = [1.0f32, volume.spacing[0] as f32, volume.spacing[1] as f32, volume.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");

    let voxels = volume.voxels();
    let mut out = h;
    out.reserve(voxels * volume.channels * dtype.size());
    for c in 0..volume.channels {
        let ch = volume.channel(c);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = ch[(i * ny + j) * nz + k];
                    match dtype {
                        NiftiDType::U8 => {
                            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                                return Err(Error::Argument(format!("value {v} not representable as uint8")));
                            }
                            out.push(v as u8);
                        }
                        NiftiDType::I16 => {
                            if v.fract() != 0.0 || !(i16::MIN as f32..=i16::MAX as f32).contains(&v) {
                                return Err(Error::Argument(format!("value {v} not representable as int16")));
                            }
                            out.extend_from_slice(&(v as i16).to_le_bytes());
                        }
                        NiftiDType::F32 => out.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Spacing is stored as f32, so it round-trips exactly only when it is
/// representable in f32.
pub fn write_nifti(volume: &Volume, path: &Path, dtype: NiftiDType) -> Result<()> {
    let bytes = encode_nifti(volume, dtype)?;
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
        file.flush()?;
    }
    Ok(())
}
