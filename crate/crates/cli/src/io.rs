//! Locating cases and label maps on disk.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use volseg::data::nifti::{read_nifti, write_nifti, NiftiDType};
use volseg::data::{
    dataset_ids, load_brats_case, load_case, read_native, read_native_case, write_native, Case, DatasetFormat, DatasetIndex,
    Volume, VolumeKind, INDEX_FILE, MODALITIES,
};
use volseg::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    #[default]
    Native,
    Nifti,
}

fn dir_name(path: &Path) -> Result<String> {
    fs::canonicalize(path)?
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Argument(format!("{}: cannot derive a case id", path.display())))
}

fn is_brats_case(dir: &Path, id: &str) -> bool {
    ["nii.gz", "nii"].iter().any(|ext| dir.join(format!("{id}_{}.{ext}", MODALITIES[0])).exists())
}

/// Where the cases behind an input path live.
#[derive(Clone, Debug)]
pub enum CaseSource {
    Dataset(PathBuf, DatasetFormat, Vec<String>),
    Native(PathBuf, String),
    Brats(PathBuf, String),
}

impl CaseSource {
    /// A native dataset (has `index.json`), a single native case directory,
    /// a single BraTS-style case directory, or a directory of BraTS cases.
    pub fn open(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::Argument(format!("{}: not a directory", path.display())));
        }
        if path.join(INDEX_FILE).exists() {
            return Ok(CaseSource::Dataset(path.into(), DatasetFormat::Native, dataset_ids(path, DatasetFormat::Native)?));
        }
        if path.join("image.json").exists() {
            return Ok(CaseSource::Native(path.into(), dir_name(path)?));
        }
        let id = dir_name(path)?;
        if is_brats_case(path, &id) {
            return Ok(CaseSource::Brats(path.into(), id));
        }
        let ids = dataset_ids(path, DatasetFormat::Brats)?;
        if ids.is_empty() {
            return Err(Error::Argument(format!("{}: no cases found", path.display())));
        }
        Ok(CaseSource::Dataset(path.into(), DatasetFormat::Brats, ids))
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            CaseSource::Dataset(_, _, ids) => ids.clone(),
            CaseSource::Native(_, id) | CaseSource::Brats(_, id) => vec![id.clone()],
        }
    }

    pub fn load(&self, id: &str) -> Result<Case> {
        match self {
            CaseSource::Dataset(dir, format, _) => load_case(dir, *format, id),
            CaseSource::Native(dir, _) => read_native_case(dir, id),
            CaseSource::Brats(dir, _) => load_brats_case(dir, id),
        }
    }
}

/// `.json` manifests are native volumes; `.nii` and `.nii.gz` are NIfTI.
pub fn read_label_file(path: &Path) -> Result<Volume> {
    let name = path.to_string_lossy();
    if name.ends_with(".json") {
        let v = read_native(path)?;
        if v.kind != VolumeKind::LabelMap {
            return Err(Error::Format(format!("{}: not a label map", path.display())));
        }
        Ok(v)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti(path, VolumeKind::LabelMap)
    } else {
        Err(Error::Argument(format!("{}: unknown label file type", path.display())))
    }
}

/// `dir/{id}/label.json` or `dir/{id}/{id}_seg.nii[.gz]`.
pub fn find_label(dir: &Path, id: &str) -> Option<PathBuf> {
    let case = dir.join(id);
    [case.join("label.json"), case.join(format!("{id}_seg.nii.gz")), case.join(format!("{id}_seg.nii"))]
        .into_iter()
        .find(|p| p.exists())
}

/// Ids listed in `index.json`, or else every subdirectory holding a label.
pub fn label_ids(dir: &Path) -> Result<Vec<String>> {
    if dir.join(INDEX_FILE).exists() {
        return Ok(DatasetIndex::read(dir)?.cases);
    }
    if !dir.is_dir() {
        return Err(Error::Argument(format!("{}: not a directory", dir.display())));
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let id = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() && find_label(dir, &id).is_some() {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_label(dir: &Path, id: &str) -> Result<Volume> {
    let path = find_label(dir, id).ok_or_else(|| Error::Argument(format!("case {id}: no label map under {}", dir.display())))?;
    read_label_file(&path)
}

pub fn write_label(out: &Path, id: &str, label: &Volume, format: LabelFormat) -> Result<PathBuf> {
    let dir = out.join(id);
    fs::create_dir_all(&dir)?;
    let path = match format {
        LabelFormat::Native => dir.join("label.json"),
        LabelFormat::Nifti => dir.join(format!("{id}_seg.nii.gz")),
    };
    match format {
        LabelFormat::Native => write_native(label, &path, &[])?,
        LabelFormat::Nifti => write_nifti(label, &path, NiftiDType::U8)?,
    }
    Ok(path)
}
