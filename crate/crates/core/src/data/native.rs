//! Native volume format: a JSON manifest next to a little-endian f32 `.raw`
//! file holding `[C][D][H][W]` with W fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Case, Volume, VolumeKind};

const FORMAT: &str = "volseg-volume";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: VolumeKind,
    channels: usize,
    extents: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    byte_order: String,
    data: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    channel_names: Vec<String>,
}

fn raw_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("raw")
}

/// Writes `path` (the manifest) and a sibling `.raw` file.
pub fn write_native(volume: &Volume, path: &Path, channel_names: &[&str]) -> Result<()> {
    volume.validate()?;
    let raw = raw_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        kind: volume.kind,
        channels: volume.channels,
        extents: volume.extents,
        spacing: volume.spacing,
        dtype: "f32".into(),
        byte_order: "little".into(),
        data: raw.file_name().unwrap().to_string_lossy().into_owned(),
        channel_names: channel_names.iter().map(|s| s.to_string()).collect(),
    };
    let mut bytes = Vec::with_capacity(4 * volume.data.len());
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_native(path: &Path) -> Result<Volume> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!("{}: not a {FORMAT} v1 manifest", path.display())));
    }
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(Error::Unsupported(format!("{} {} data", manifest.byte_order, manifest.dtype)));
    }
    let raw = path.parent().unwrap_or(Path::new(".")).join(&manifest.data);
    let bytes = fs::read(&raw)?;
    let expected = 4 * manifest.channels * manifest.extents.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: manifest declares {} bytes, data file has {}",
            raw.display(),
            expected,
            bytes.len()
        )));
    }
    if !manifest.channel_names.is_empty() && manifest.channel_names.len() != manifest.channels {
        return Err(Error::Format(format!("{}: channel_names does not match channels", path.display())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(manifest.channels, manifest.extents, manifest.spacing, data, manifest.kind)
}

/// `dir/image.json` (+ `.raw`) and, when labelled, `dir/label.json`.
pub fn write_native_case(case: &Case, dir: &Path) -> Result<()> {
    case.validate()?;
    fs::create_dir_all(dir)?;
    write_native(&case.image, &dir.join("image.json"), &super::MODALITIES[..case.image.channels.min(4)])?;
    if let Some(label) = &case.label {
        write_native(label, &dir.join("label.json"), &[])?;
    }
    Ok(())
}

pub fn read_native_case(dir: &Path, id: &str) -> Result<Case> {
    let image = read_native(&dir.join("image.json"))?;
    let label_path = dir.join("label.json");
    let label = if label_path.exists() { Some(read_native(&label_path)?) } else { None };
    let case = Case { id: id.to_string(), image, label };
    case.validate()?;
    Ok(case)
}
