//! Dataset directories.
//!
//! Native: `index.json` listing case ids, one `{id}/` directory per case.
//! BraTS-style: `{id}/{id}_{t1,t1ce,t2,flair,seg}.nii[.gz]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::native::{read_native_case, write_native_case};
use super::nifti::read_nifti;
use super::{Case, Volume, VolumeKind, MODALITIES};

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Native,
    Brats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub cases: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl DatasetIndex {
    pub fn new(cases: Vec<String>, meta: serde_json::Value) -> Self {
        DatasetIndex { format: "volseg-dataset".into(), version: 1, cases, meta }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let idx: DatasetIndex = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if idx.format != "volseg-dataset" || idx.version != 1 {
            return Err(Error::Format(format!("{}: not a volseg-dataset v1 index", path.display())));
        }
        Ok(idx)
    }
}

pub fn write_native_dataset(dir: &Path, cases: &[Case], meta: serde_json::Value) -> Result<DatasetIndex> {
    fs::create_dir_all(dir)?;
    for case in cases {
        write_native_case(case, &dir.join(&case.id))?;
    }
    let index = DatasetIndex::new(cases.iter().map(|c| c.id.clone()).collect(), meta);
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(index)
}

fn nifti_file(dir: &Path, id: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"].iter().map(|ext| dir.join(format!("{id}_{suffix}.{ext}"))).find(|p| p.exists())
}

/// One BraTS-style case directory; the `seg` file is optional.
pub fn load_brats_case(dir: &Path, id: &str) -> Result<Case> {
    let mut channels: Vec<Volume> = Vec::with_capacity(4);
    for m in MODALITIES {
        let p = nifti_file(dir, id, m)
            .ok_or_else(|| Error::Argument(format!("case {id}: missing {m} image in {}", dir.display())))?;
        let v = read_nifti(&p, VolumeKind::Image)?;
        if v.channels != 1 {
            return Err(Error::Format(format!("{}: expected a single-channel volume", p.display())));
        }
        if let Some(first) = channels.first() {
            if first.extents != v.extents {
                return Err(Error::Shape(format!("case {id}: modality {m} has extents {:?}, expected {:?}", v.extents, first.extents)));
            }
        }
        channels.push(v);
    }
    let (extents, spacing) = (channels[0].extents, channels[0].spacing);
    let data = channels.into_iter().flat_map(|v| v.data).collect();
    let image = Volume::new(4, extents, spacing, data, VolumeKind::Image)?;
    let label = nifti_file(dir, id, "seg").map(|p| read_nifti(&p, VolumeKind::LabelMap)).transpose()?;
    let case = Case { id: id.to_string(), image, label };
    case.validate()?;
    Ok(case)
}

/// Case ids of a dataset directory, in a stable order.
pub fn dataset_ids(dir: &Path, format: DatasetFormat) -> Result<Vec<String>> {
    match format {
        DatasetFormat::Native => Ok(DatasetIndex::read(dir)?.cases),
        DatasetFormat::Brats => {
            let mut ids = Vec::new();
            for entry in fs::read_dir(dir)? {
                let entry = entry?;
                if entry.file_type()?.is_dir() {
                    let id = entry.file_name().to_string_lossy().into_owned();
                    if nifti_file(&entry.path(), &id, MODALITIES[0]).is_some() {
                        ids.push(id);
                    }
                }
            }
            ids.sort();
            Ok(ids)
        }
    }
}

pub fn load_case(dir: &Path, format: DatasetFormat, id: &str) -> Result<Case> {
    match format {
        DatasetFormat::Native => read_native_case(&dir.join(id), id),
        DatasetFormat::Brats => load_brats_case(&dir.join(id), id),
    }
}

pub fn load_dataset(dir: &Path, format: DatasetFormat) -> Result<Vec<Case>> {
    dataset_ids(dir, format)?.iter().map(|id| load_case(dir, format, id)).collect()
}
