//! `volseg synth`: a reproducible synthetic dataset.

use std::path::Path;

use rayon::prelude::*;
use serde_json::json;
use volseg::data::{synth_case, write_native_dataset, Case, DatasetIndex, SynthSpec};
use volseg::rng::{hash_str, stream};
use volseg::{Error, Result};

pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

pub fn generate(count: usize, spec: &SynthSpec, seed: u64) -> Result<Vec<Case>> {
    if count == 0 {
        return Err(Error::Argument("--cases must be >= 1".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| synth_case(&case_id(i), spec, &mut stream(seed, &[hash_str("synth"), i as u64])))
        .collect()
}

pub fn cmd_synth(out: &Path, count: usize, spec: &SynthSpec, seed: u64) -> Result<DatasetIndex> {
    let cases = generate(count, spec, seed)?;
    let meta = json!({ "generator": "synthetic", "seed": seed, "spec": spec });
    let index = write_native_dataset(out, &cases, meta)?;
    log::info!("event=synth out={} cases={} extents={:?}", out.display(), count, spec.extents);
    Ok(index)
}
